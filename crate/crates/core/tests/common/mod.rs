//! Naive reference implementations used as test oracles.

#![allow(dead_code)]

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Fraction of rows whose highest cosine to any other row is below `t`.
pub fn naive_d_sep(rows: &[Vec<f64>], t: f64) -> f64 {
    let n = rows.len();
    let sep = (0..n)
        .filter(|&i| {
            (0..n)
                .filter(|&j| j != i)
                .all(|j| cos(&rows[i], &rows[j]) < t)
        })
        .count();
    sep as f64 / n as f64
}

/// Mean over groups of the mean cosine of each member to the group mean.
pub fn naive_d_consis(groups: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    for g in groups {
        let d = g[0].len();
        let mut c = vec![0.0; d];
        for r in g {
            for (x, y) in c.iter_mut().zip(r) {
                *x += y / g.len() as f64;
            }
        }
        total += g.iter().map(|r| cos(r, &c)).sum::<f64>() / g.len() as f64;
    }
    total / groups.len() as f64
}

/// Textbook DBSCAN on unit rows with cosine distance, clusters numbered by
/// first core point in index order.
pub fn naive_dbscan(rows: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = rows.len();
    let near = |i: usize| -> Vec<usize> {
        (0..n).filter(|&j| 1.0 - dot(&rows[i], &rows[j]) <= eps).collect()
    };
    let core: Vec<bool> = (0..n).map(|i| near(i).len() >= min_pts).collect();
    let mut label = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if !core[i] || label[i].is_some() {
            continue;
        }
        let c = next;
        next += 1;
        let mut frontier = vec![i];
        label[i] = Some(c);
        while let Some(p) = frontier.pop() {
            for q in near(p) {
                if label[q].is_none() {
                    label[q] = Some(c);
                    if core[q] {
                        frontier.push(q);
                    }
                }
            }
        }
    }
    label
}

/// Lowest impostor-score threshold keeping the `score >= t` acceptance rate
/// within `fpr`; just above the top impostor when none qualifies.
pub fn naive_tpr_at_fpr(genuine: &[f64], impostor: &[f64], fpr: f64) -> (f64, f64) {
    let rate = |s: &[f64], t: f64| s.iter().filter(|&&x| x >= t).count() as f64 / s.len() as f64;
    let top = impostor.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut best = top.next_up();
    for &t in impostor {
        if rate(impostor, t) <= fpr && t < best {
            best = t;
        }
    }
    (best, rate(genuine, best))
}

fn naive_accuracy(pairs: &[(f64, bool)], t: f64) -> f64 {
    pairs.iter().filter(|(s, g)| (*s > t) == *g).count() as f64 / pairs.len() as f64
}

/// Contiguous k-fold accuracy with the best midpoint threshold of the
/// training folds, ties to the lowest threshold.
pub fn naive_kfold(pairs: &[(f64, bool)], k: usize) -> f64 {
    let n = pairs.len();
    let mut acc = 0.0;
    for f in 0..k {
        let (a, b) = (f * n / k, (f + 1) * n / k);
        let train: Vec<(f64, bool)> = pairs[..a].iter().chain(&pairs[b..]).copied().collect();
        let mut s: Vec<f64> = train.iter().map(|p| p.0).collect();
        s.sort_by(f64::total_cmp);
        s.dedup();
        let mut cands = vec![s[0] - 1.0];
        cands.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        cands.push(s[s.len() - 1] + 1.0);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for t in cands {
            let a = naive_accuracy(&train, t);
            if a > best.0 {
                best = (a, t);
            }
        }
        acc += naive_accuracy(&pairs[a..b], best.1);
    }
    acc / k as f64
}
