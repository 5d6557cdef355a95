use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedding, OracleEmbedder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Acceptance thresholds; both comparisons are strict.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gate {
    pub min_sim: f64,
    pub min_quality: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    /// Applied to the single identity image against the identity vector.
    pub identity: Gate,
    /// Applied to perturbed images against the identity image's feature.
    pub perturbation: Gate,
}

impl Default for GateConfig {
    /// Thresholds for a 512-d magnitude-aware recognition space.
    fn default() -> Self {
        GateConfig {
            identity: Gate { min_sim: 0.9, min_quality: 26.0 },
            perturbation: Gate { min_sim: 0.7, min_quality: 24.0 },
        }
    }
}

impl GateConfig {
    /// Toy-space gates: quality thresholds at the 60th and 40th percentile of
    /// observed embedding magnitudes.
    pub fn from_magnitudes(magnitudes: &[f64]) -> Result<Self> {
        Ok(GateConfig {
            identity: Gate { min_sim: 0.9, min_quality: percentile(magnitudes, 0.6)? },
            perturbation: Gate { min_sim: 0.7, min_quality: percentile(magnitudes, 0.4)? },
        })
    }

    pub fn validate(&self) -> Result<()> {
        for g in [self.identity, self.perturbation] {
            if !(-1.0..=1.0).contains(&g.min_sim) || !g.min_quality.is_finite() {
                return Err(Error::Config(format!("gate out of range: {g:?}")));
            }
        }
        if self.identity.min_sim < self.perturbation.min_sim {
            return Err(Error::Config(
                "identity gate min_sim must be at least the perturbation gate's".into(),
            ));
        }
        Ok(())
    }
}

/// Nearest-rank percentile, `p` in (0, 1].
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("percentile {p} outside (0, 1]")));
    }
    let mut v = values.to_vec();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "percentile" });
    }
    v.sort_by(f64::total_cmp);
    let rank = (p * v.len() as f64).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateDecision {
    pub accept: bool,
    pub sim: f64,
    pub quality: f64,
}

impl Gate {
    /// Judge an already embedded image against a reference vector.
    pub fn check(&self, feature: &Embedding, reference: &Embedding) -> Result<GateDecision> {
        let sim = cosine(feature.values(), reference.values())?;
        let quality = feature.norm();
        Ok(GateDecision {
            accept: sim > self.min_sim && quality > self.min_quality,
            sim,
            quality,
        })
    }
}

pub fn gate_identity(image: &Tensor, v_id: &Embedding, oracle: &OracleEmbedder, gate: &Gate) -> Result<GateDecision> {
    gate.check(&oracle.embed(image)?, v_id)
}

pub fn gate_perturbation(
    image: &Tensor,
    identity_feature: &Embedding,
    oracle: &OracleEmbedder,
    gate: &Gate,
) -> Result<GateDecision> {
    gate.check(&oracle.embed(image)?, identity_feature)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn strict_thresholds() {
        let g = Gate { min_sim: 0.6, min_quality: 5.0 };
        // cosine exactly 0.6 with norm 10
        let d = g.check(&e(&[6.0, 8.0]), &e(&[1.0, 0.0])).unwrap();
        assert_eq!((d.sim, d.quality), (0.6, 10.0));
        assert!(!d.accept);
        let d = g.check(&e(&[8.0, 6.0]), &e(&[1.0, 0.0])).unwrap();
        assert!(d.accept);
        let d = g.check(&e(&[4.0, 3.0]), &e(&[1.0, 0.0])).unwrap();
        assert!(!d.accept, "quality 5 is not above 5");
    }

    #[test]
    fn default_gates_are_ordered() {
        let g = GateConfig::default();
        g.validate().unwrap();
        assert_eq!((g.identity.min_sim, g.identity.min_quality), (0.9, 26.0));
        let mut bad = g;
        bad.perturbation.min_sim = 0.95;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.6).unwrap(), 6.0);
        assert_eq!(percentile(&v, 0.4).unwrap(), 4.0);
        assert_eq!(percentile(&v, 1.0).unwrap(), 10.0);
        assert!(percentile(&[], 0.5).is_err());
    }
}
