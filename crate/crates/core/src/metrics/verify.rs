use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Similarity scores of same-identity and different-identity pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    fn check(&self) -> Result<()> {
        if self.genuine.is_empty() {
            return Err(Error::Empty("genuine scores"));
        }
        if self.impostor.is_empty() {
            return Err(Error::Empty("impostor scores"));
        }
        if self.genuine.iter().chain(&self.impostor).any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: "verification scores" });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateAtThreshold {
    pub threshold: f64,
    pub tpr: f64,
    /// Realized false-positive rate at `threshold`.
    pub fpr: f64,
}

fn rate(scores: &[f64], threshold: f64) -> f64 {
    scores.iter().filter(|&&s| s >= threshold).count() as f64 / scores.len() as f64
}

/// Lowest threshold whose impostor acceptance rate (`score >= threshold`)
/// stays within `fpr_target`, scanning the sorted impostor scores. When even
/// the top impostor alone exceeds the budget, the threshold sits just above it.
pub fn threshold_at_fpr(impostor: &[f64], fpr_target: f64) -> Result<f64> {
    if !(fpr_target > 0.0 && fpr_target < 1.0) {
        return Err(Error::invalid(format!("fpr target {fpr_target} outside (0, 1)")));
    }
    if impostor.is_empty() {
        return Err(Error::Empty("impostor scores"));
    }
    let mut s = impostor.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let n = s.len() as f64;
    let mut threshold = s[0].next_up();
    let mut i = 0;
    while i < s.len() {
        let v = s[i];
        while i < s.len() && s[i] == v {
            i += 1;
        }
        if i as f64 / n <= fpr_target {
            threshold = v;
        } else {
            break;
        }
    }
    Ok(threshold)
}

pub fn tpr_at_fpr(scores: &ScoreSet, fpr_target: f64) -> Result<RateAtThreshold> {
    scores.check()?;
    let threshold = threshold_at_fpr(&scores.impostor, fpr_target)?;
    Ok(RateAtThreshold {
        threshold,
        tpr: rate(&scores.genuine, threshold),
        fpr: rate(&scores.impostor, threshold),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub score: f64,
    pub genuine: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub thresholds: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

/// Candidate thresholds: below the minimum, every midpoint between distinct
/// neighbours, above the maximum. A pair is called genuine when
/// `score > threshold`.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut c = Vec::with_capacity(s.len() + 1);
    c.push(s[0] - 1.0);
    c.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    c.push(s[s.len() - 1] + 1.0);
    c
}

pub fn accuracy(pairs: &[LabeledScore], threshold: f64) -> f64 {
    pairs.iter().filter(|p| (p.score > threshold) == p.genuine).count() as f64 / pairs.len() as f64
}

/// Highest-accuracy threshold over the candidates; ties go to the lowest.
pub fn best_threshold(pairs: &[LabeledScore]) -> f64 {
    let mut sorted: Vec<LabeledScore> = pairs.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // start below everything: all called genuine
    let mut correct = sorted.iter().filter(|p| p.genuine).count() as i64;
    let mut best = (correct, sorted[0].score - 1.0);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].score;
        while i < sorted.len() && sorted[i].score == v {
            correct += if sorted[i].genuine { -1 } else { 1 };
            i += 1;
        }
        let t = if i < sorted.len() { 0.5 * (v + sorted[i].score) } else { v + 1.0 };
        if correct > best.0 {
            best = (correct, t);
        }
    }
    best.1
}

/// Contiguous folds in input order: fold `i` covers `[i*n/k, (i+1)*n/k)`.
pub fn fold_bounds(n: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|i| (i * n / k, (i + 1) * n / k)).collect()
}

pub fn kfold_accuracy(pairs: &[LabeledScore], k: usize) -> Result<KFoldReport> {
    if k < 2 {
        return Err(Error::invalid("k-fold needs at least two folds"));
    }
    if pairs.len() < k {
        return Err(Error::invalid(format!("{} pairs for {k} folds", pairs.len())));
    }
    if pairs.iter().any(|p| !p.score.is_finite()) {
        return Err(Error::NonFinite { op: "kfold scores" });
    }
    let (mut thresholds, mut accuracies) = (Vec::new(), Vec::new());
    for (fold, (a, b)) in fold_bounds(pairs.len(), k).into_iter().enumerate() {
        let test = &pairs[a..b];
        if test.iter().all(|p| p.genuine) || test.iter().all(|p| !p.genuine) {
            return Err(Error::SingleClassFold { fold });
        }
        let train: Vec<LabeledScore> = pairs[..a].iter().chain(&pairs[b..]).copied().collect();
        let t = best_threshold(&train);
        thresholds.push(t);
        accuracies.push(accuracy(test, t));
    }
    let mean_accuracy = accuracies.iter().sum::<f64>() / k as f64;
    Ok(KFoldReport { thresholds, accuracies, mean_accuracy })
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub race: String,
    pub gender: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub group: GroupKey,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicTable {
    /// Single threshold from the pooled impostor scores of every group.
    pub threshold: f64,
    pub rows: Vec<GroupRate>,
    /// Per race: TPR(male) - TPR(female).
    pub gaps: BTreeMap<String, f64>,
}

pub fn demographic_breakdown(groups: &BTreeMap<GroupKey, ScoreSet>, fpr_target: f64) -> Result<DemographicTable> {
    if groups.is_empty() {
        return Err(Error::Empty("demographic groups"));
    }
    let mut pooled = Vec::new();
    for (k, s) in groups {
        s.check()
            .map_err(|e| Error::invalid(format!("group {}/{}: {e}", k.race, k.gender)))?;
        pooled.extend_from_slice(&s.impostor);
    }
    let threshold = threshold_at_fpr(&pooled, fpr_target)?;
    let rows: Vec<GroupRate> = groups
        .iter()
        .map(|(k, s)| GroupRate { group: k.clone(), tpr: rate(&s.genuine, threshold) })
        .collect();
    let mut gaps = BTreeMap::new();
    let races: std::collections::BTreeSet<&String> = groups.keys().map(|k| &k.race).collect();
    for race in races {
        let get = |gender: &str| {
            rows.iter()
                .find(|r| &r.group.race == race && r.group.gender == gender)
                .map(|r| r.tpr)
                .ok_or_else(|| Error::MissingGroup(format!("{race}/{gender}")))
        };
        gaps.insert(race.clone(), get("male")? - get("female")?);
    }
    Ok(DemographicTable { threshold, rows, gaps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_impostor_threshold() {
        let s = ScoreSet {
            genuine: vec![0.95; 5],
            impostor: (1..=9).map(|i| i as f64 / 10.0).collect(),
        };
        let r = tpr_at_fpr(&s, 0.12).unwrap();
        assert_eq!((r.threshold, r.tpr), (0.9, 1.0));
        assert!((r.fpr - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn tiny_budget_goes_above_every_impostor() {
        let s = ScoreSet { genuine: vec![0.5, 0.9], impostor: vec![0.1, 0.5] };
        let r = tpr_at_fpr(&s, 0.1).unwrap();
        assert!(r.threshold > 0.5);
        assert_eq!((r.fpr, r.tpr), (0.0, 0.5));
        assert!(tpr_at_fpr(&s, 1.0).is_err());
    }

    #[test]
    fn separable_scores_are_perfect() {
        let pairs: Vec<LabeledScore> = (0..40)
            .map(|i| LabeledScore { score: if i % 2 == 0 { 0.8 } else { 0.1 } + i as f64 * 1e-3, genuine: i % 2 == 0 })
            .collect();
        assert_eq!(kfold_accuracy(&pairs, 10).unwrap().mean_accuracy, 1.0);
    }

    #[test]
    fn single_class_fold_rejected() {
        let pairs: Vec<LabeledScore> = (0..20).map(|i| LabeledScore { score: i as f64, genuine: i < 10 }).collect();
        assert!(matches!(kfold_accuracy(&pairs, 10), Err(Error::SingleClassFold { fold: 0 })));
    }

    #[test]
    fn missing_gender_reported() {
        let s = ScoreSet { genuine: vec![0.9], impostor: vec![0.1] };
        let mut g = BTreeMap::new();
        g.insert(GroupKey { race: "a".into(), gender: "male".into() }, s.clone());
        assert!(matches!(demographic_breakdown(&g, 0.1), Err(Error::MissingGroup(_))));
        g.insert(GroupKey { race: "a".into(), gender: "female".into() }, s);
        assert_eq!(demographic_breakdown(&g, 0.1).unwrap().gaps["a"], 0.0);
    }
}
