//! Embedding vectors and the operations on them: cosine similarity, norm
//! control, the frozen oracle embedder and blocked similarity scans.

mod oracle;
mod scan;
mod store;

pub use oracle::{OracleConfig, OracleEmbedder};
pub use scan::{max_cosine_against, pairwise_max_cosine, UnitRows, SCAN_BLOCK_ROWS};
pub use store::{labels_path, VectorStore, STORE_MAGIC, STORE_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::dot;
use crate::tensor::Tensor;

/// Default norm band applied to perturbed vectors.
pub const NORM_LO: f64 = 18.0;
pub const NORM_HI: f64 = 24.0;

/// A point in the embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "embedding" });
        }
        Ok(Embedding(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.0.clone())
    }

    pub fn scaled(&self, s: f64) -> Embedding {
        Embedding(self.0.iter().map(|v| v * s).collect())
    }

    pub fn normalized(&self) -> Result<Embedding> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::ZeroVector { op: "normalize" });
        }
        Ok(self.scaled(1.0 / n))
    }

    /// Round every coordinate through `f32`, the precision of on-disk stores.
    pub fn to_f32_precision(&self) -> Embedding {
        Embedding(self.0.iter().map(|&v| f64::from(v as f32)).collect())
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Cosine similarity; a zero vector on either side is an error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector { op: "cosine" });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Rescale `v` so its norm lies in `[lo, hi]`, keeping its direction.
/// Vectors already inside the band are returned unchanged.
pub fn norm_clamp(v: &Embedding, lo: f64, hi: f64) -> Result<Embedding> {
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::invalid(format!("norm band [{lo}, {hi}]")));
    }
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::ZeroVector { op: "norm_clamp" });
    }
    if n < lo {
        Ok(v.scaled(lo / n))
    } else if n > hi {
        Ok(v.scaled(hi / n))
    } else {
        Ok(v.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clamp_projects_onto_upper_bound() {
        let v = Embedding::new(vec![18.0, 24.0]).unwrap(); // norm 30
        let c = norm_clamp(&v, NORM_LO, NORM_HI).unwrap();
        assert!((c.norm() - 24.0).abs() < 1e-12);
        assert!((cosine(c.values(), v.values()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_leaves_inside_vectors() {
        let v = Embedding::new(vec![12.0, 16.0]).unwrap(); // norm 20
        assert_eq!(norm_clamp(&v, NORM_LO, NORM_HI).unwrap(), v);
    }

    #[test]
    fn clamp_rejects_zero_and_bad_band() {
        assert!(norm_clamp(&Embedding::zeros(3), 18.0, 24.0).is_err());
        let v = Embedding::new(vec![1.0]).unwrap();
        assert!(norm_clamp(&v, 24.0, 18.0).is_err());
        assert!(norm_clamp(&v, 0.0, 18.0).is_err());
    }

    #[test]
    fn cosine_zero_is_error() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
    }

    proptest! {
        #[test]
        fn cosine_bounded(a in prop::collection::vec(-10.0f64..10.0, 8),
                          b in prop::collection::vec(-10.0f64..10.0, 8)) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let c = cosine(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn clamp_idempotent(v in prop::collection::vec(-50.0f64..50.0, 6)) {
            let e = Embedding::new(v).unwrap();
            prop_assume!(e.norm() > 1e-6);
            let once = norm_clamp(&e, NORM_LO, NORM_HI).unwrap();
            let twice = norm_clamp(&once, NORM_LO, NORM_HI).unwrap();
            prop_assert!(once.norm() >= NORM_LO - 1e-9 && once.norm() <= NORM_HI + 1e-9);
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
