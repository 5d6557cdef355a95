//! Identity-vector sampling under a pairwise separation constraint, and
//! Gaussian perturbation of identity features into intra-class vectors.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, norm_clamp, Embedding, UnitRows, VectorStore, NORM_HI, NORM_LO};
use crate::error::{Error, Result};
use crate::rng;

/// Consecutive rejected draws after which sampling gives up.
pub const STALL_DRAWS: usize = 10_000;
/// Noise redraws allowed per perturbation slot.
pub const SLOT_RETRIES: usize = 1_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub dim: usize,
    pub count: usize,
    #[serde(default = "default_max_sim")]
    pub max_id_similarity: f64,
    pub seed: u64,
}

fn default_max_sim() -> f64 {
    0.3
}

impl SamplerConfig {
    pub fn new(dim: usize, count: usize, seed: u64) -> Self {
        SamplerConfig {
            dim,
            count,
            max_id_similarity: default_max_sim(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.count == 0 {
            return Err(Error::invalid("sampler dim and count must be positive"));
        }
        if !(self.max_id_similarity > 0.0 && self.max_id_similarity < 1.0) {
            return Err(Error::invalid(format!(
                "max_id_similarity {} outside (0, 1)",
                self.max_id_similarity
            )));
        }
        Ok(())
    }
}

/// Draw identity vectors from a standard Gaussian, keeping a draw only when
/// its cosine to every previously kept vector is below the threshold.
///
/// Values are rounded to `f32` before the check so the written store
/// satisfies the constraint exactly as stored. Labels are `0..count`.
pub fn sample_identities(cfg: &SamplerConfig) -> Result<VectorStore> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, "identities", 0);
    let mut accepted = UnitRows::new(cfg.dim);
    let mut store = VectorStore::new(cfg.dim);
    let mut rejected_run = 0;
    let mut candidate = vec![0.0; cfg.dim];
    let mut unit = vec![0.0; cfg.dim];
    while store.len() < cfg.count {
        for v in candidate.iter_mut() {
            *v = f64::from(r.sample::<f64, _>(StandardNormal) as f32);
        }
        let n = candidate.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            continue;
        }
        for (u, v) in unit.iter_mut().zip(&candidate) {
            *u = v / n;
        }
        if accepted.any_at_least(&unit, cfg.max_id_similarity) {
            rejected_run += 1;
            if rejected_run >= STALL_DRAWS {
                return Err(Error::SamplingStall {
                    accepted: store.len(),
                    draws: rejected_run,
                });
            }
            continue;
        }
        rejected_run = 0;
        accepted.push(&candidate)?;
        store.push_labelled(&candidate, store.len().to_string())?;
    }
    Ok(store)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaShare {
    pub sigma: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub per_identity: usize,
    pub mixture: Vec<SigmaShare>,
    pub min_similarity_to_identity: f64,
    pub norm_lo: f64,
    pub norm_hi: f64,
    /// Norm given to each normalized vector; `None` means the band midpoint.
    #[serde(default)]
    pub norm_target: Option<f64>,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            per_identity: 50,
            mixture: vec![
                SigmaShare {
                    sigma: 0.3,
                    fraction: 0.4,
                },
                SigmaShare {
                    sigma: 0.5,
                    fraction: 0.4,
                },
                SigmaShare {
                    sigma: 0.7,
                    fraction: 0.2,
                },
            ],
            min_similarity_to_identity: 0.5,
            norm_lo: NORM_LO,
            norm_hi: NORM_HI,
            norm_target: None,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.per_identity == 0 {
            return Err(Error::invalid("per_identity must be positive"));
        }
        if self.mixture.is_empty() {
            return Err(Error::invalid("empty sigma mixture"));
        }
        let total: f64 = self.mixture.iter().map(|s| s.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture fractions sum to {total}")));
        }
        if self.mixture.iter().any(|s| !(s.sigma > 0.0) || s.fraction < 0.0) {
            return Err(Error::invalid("mixture needs sigma > 0 and fraction >= 0"));
        }
        if !(self.norm_lo > 0.0 && self.norm_lo <= self.norm_hi) {
            return Err(Error::invalid("norm band"));
        }
        if let Some(t) = self.norm_target {
            if t < self.norm_lo || t > self.norm_hi {
                return Err(Error::invalid("norm_target outside band"));
            }
        }
        if !(-1.0..=1.0).contains(&self.min_similarity_to_identity) {
            return Err(Error::invalid("min_similarity_to_identity outside [-1, 1]"));
        }
        Ok(())
    }

    /// Exact slot counts per mixture component (largest remainder).
    pub fn slot_counts(&self) -> Vec<usize> {
        let k = self.per_identity as f64;
        let raw: Vec<f64> = self.mixture.iter().map(|s| s.fraction * k).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| (r + 1e-9).floor() as usize).collect();
        let mut missing = self.per_identity - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = raw[a] - counts[a] as f64;
            let rb = raw[b] - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for i in order {
            if missing == 0 {
                break;
            }
            counts[i] += 1;
            missing -= 1;
        }
        counts
    }

    fn target_norm(&self) -> f64 {
        self.norm_target
            .unwrap_or(0.5 * (self.norm_lo + self.norm_hi))
    }
}

/// One perturbed vector with the mixture component it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub vector: Embedding,
    pub sigma: f64,
}

/// `K` perturbed copies of `v_id`: Gaussian noise per mixture component,
/// redrawn per slot until the similarity floor holds, then normalized and
/// scaled into the norm band.
pub fn perturb_identity(v_id: &Embedding, spec: &PerturbationSpec, seed: u64) -> Result<Vec<Perturbed>> {
    spec.validate()?;
    if v_id.norm() == 0.0 {
        return Err(Error::ZeroVector { op: "perturb_identity" });
    }
    let mut r = rng::stream(seed, "perturb", 0);
    let target = spec.target_norm();
    let mut out = Vec::with_capacity(spec.per_identity);
    let mut slot = 0;
    for (share, count) in spec.mixture.iter().zip(spec.slot_counts()) {
        for _ in 0..count {
            let mut tries = 0;
            let v = loop {
                if tries == SLOT_RETRIES {
                    return Err(Error::RetryExhausted { slot, tries });
                }
                tries += 1;
                let cand: Vec<f64> = v_id
                    .values()
                    .iter()
                    .map(|x| x + share.sigma * r.sample::<f64, _>(StandardNormal))
                    .collect();
                let Ok(c) = cosine(v_id.values(), &cand) else {
                    continue;
                };
                if c >= spec.min_similarity_to_identity {
                    break Embedding::new(cand)?;
                }
            };
            let scaled = v.normalized()?.scaled(target);
            let vector = norm_clamp(&scaled, spec.norm_lo, spec.norm_hi)?;
            out.push(Perturbed {
                vector,
                sigma: share.sigma,
            });
            slot += 1;
        }
    }
    Ok(out)
}

/// Perturb every identity of a store with per-identity seed substreams.
/// Output rows are labelled with their identity's label.
pub fn perturb_store(ids: &VectorStore, spec: &PerturbationSpec, seed: u64) -> Result<VectorStore> {
    let mut out = VectorStore::new(ids.dim());
    for i in 0..ids.len() {
        let label = ids
            .labels()
            .map(|l| l[i].clone())
            .unwrap_or_else(|| i.to_string());
        let sub = rng::derive_seed(seed, "identity", i as u64);
        for p in perturb_identity(&ids.embedding(i), spec, sub)? {
            out.push_labelled(p.vector.values(), label.clone())?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_threshold() {
        assert_eq!(SamplerConfig::new(4, 1, 0).max_id_similarity, 0.3);
    }

    #[test]
    fn small_sample_satisfies_constraint() {
        let s = sample_identities(&SamplerConfig::new(64, 200, 11)).unwrap();
        assert_eq!(s.len(), 200);
        for i in 0..s.len() {
            for j in 0..i {
                assert!(cosine(s.row(i), s.row(j)).unwrap() < 0.3);
            }
        }
    }

    #[test]
    fn two_dimensional_space_stalls() {
        let err = sample_identities(&SamplerConfig::new(2, 50, 1)).unwrap_err();
        assert!(matches!(err, Error::SamplingStall { .. }));
        assert!(err.to_string().contains("lower the count"));
    }

    #[test]
    fn deterministic_under_seed() {
        let a = sample_identities(&SamplerConfig::new(16, 20, 9)).unwrap();
        let b = sample_identities(&SamplerConfig::new(16, 20, 9)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = sample_identities(&SamplerConfig::new(16, 20, 10)).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn invalid_threshold_rejected() {
        let mut c = SamplerConfig::new(4, 1, 0);
        c.max_id_similarity = 1.0;
        assert!(sample_identities(&c).is_err());
    }

    #[test]
    fn default_mixture_counts() {
        let spec = PerturbationSpec::default();
        assert_eq!(spec.slot_counts(), vec![20, 20, 10]);
        let mut odd = spec.clone();
        odd.per_identity = 7;
        assert_eq!(odd.slot_counts().iter().sum::<usize>(), 7);
    }

    #[test]
    fn perturbations_meet_all_constraints() {
        let ids = sample_identities(&SamplerConfig::new(64, 3, 2)).unwrap();
        let spec = PerturbationSpec::default();
        for i in 0..ids.len() {
            let v = ids.embedding(i);
            let out = perturb_identity(&v, &spec, 40 + i as u64).unwrap();
            assert_eq!(out.len(), 50);
            for s in [0.3, 0.5, 0.7] {
                let n = out.iter().filter(|p| p.sigma == s).count();
                assert_eq!(n, if s == 0.7 { 10 } else { 20 });
            }
            for p in &out {
                let n = p.vector.norm();
                assert!((18.0..=24.0).contains(&n), "{n}");
                assert!(cosine(p.vector.values(), v.values()).unwrap() >= 0.5);
            }
        }
    }

    #[test]
    fn vanishing_sigma_keeps_direction() {
        let v = Embedding::new(vec![3.0, -1.0, 2.0, 0.5]).unwrap();
        let spec = PerturbationSpec {
            per_identity: 5,
            mixture: vec![SigmaShare {
                sigma: 1e-9,
                fraction: 1.0,
            }],
            ..PerturbationSpec::default()
        };
        let unit = v.normalized().unwrap();
        for p in perturb_identity(&v, &spec, 3).unwrap() {
            let d = p.vector.normalized().unwrap();
            for (a, b) in d.values().iter().zip(unit.values()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn impossible_floor_exhausts_retries() {
        let v = Embedding::new(vec![1.0, 0.0]).unwrap();
        let spec = PerturbationSpec {
            per_identity: 1,
            mixture: vec![SigmaShare {
                sigma: 0.5,
                fraction: 1.0,
            }],
            min_similarity_to_identity: 1.0,
            ..PerturbationSpec::default()
        };
        assert!(matches!(
            perturb_identity(&v, &spec, 0),
            Err(Error::RetryExhausted { .. })
        ));
    }

    #[test]
    fn zero_identity_rejected() {
        assert!(perturb_identity(&Embedding::zeros(4), &PerturbationSpec::default(), 0).is_err());
    }
}
