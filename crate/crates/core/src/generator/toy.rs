//! Procedural image world used in place of real face photographs.
//!
//! An image is `tanh(c·Σ_k z_k φ_k + gain·p·ramp(x))` where `z` is a latent
//! code living in the oracle's embedding space and `p` is a pose value that
//! tilts intensity toward one side. The basis fields are the rows of
//! `(WᵀW)⁻¹Wᵀ` for the oracle weights `W`, so the oracle reads the code of a
//! low-contrast image back linearly and toy features are close to isotropic.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::ImageShape;
use crate::embedding::{Embedding, OracleEmbedder};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyWorldConfig {
    pub image: ImageShape,
    /// Contrast of the latent part of the field.
    pub contrast: f64,
    /// Field tilt per unit of pose.
    pub pose_gain: f64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        ToyWorldConfig {
            image: ImageShape::new(16, 16, 1),
            contrast: 1.0,
            pose_gain: 1.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyWorld {
    config: ToyWorldConfig,
    /// `[latent_dim, numel]`, scaled to unit mean-square amplitude.
    fields: Tensor,
    ramp: Vec<f64>,
}

/// Solve `A X = B` for symmetric positive definite `A` (`n×n`) and `B`
/// (`n×m`), both row-major.
fn cholesky_solve(a: &[f64], b: &[f64], n: usize, m: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return Err(Error::invalid("oracle weights are rank deficient"));
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut x = b.to_vec();
    for c in 0..m {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * x[k * m + c]).sum();
            x[i * m + c] = (x[i * m + c] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k * m + c]).sum();
            x[i * m + c] = (x[i * m + c] - s) / l[i * n + i];
        }
    }
    Ok(x)
}

impl ToyWorld {
    pub fn new(config: ToyWorldConfig, oracle: &OracleEmbedder) -> Result<Self> {
        let s = config.image;
        let n = s.numel();
        if n == 0 || n != oracle.dim_in() {
            return Err(Error::Shape {
                op: "toy world",
                lhs: s.dims().to_vec(),
                rhs: vec![oracle.dim_in()],
            });
        }
        let k = oracle.dim_out();
        let w = oracle.weights().data();
        // gram = WᵀW, rhs = Wᵀ
        let mut gram = vec![0.0; k * k];
        crate::tensor::kernels::matmul_at_acc(w, w, &mut gram, n, k, k);
        let mut wt = vec![0.0; k * n];
        for i in 0..n {
            for j in 0..k {
                wt[j * n + i] = w[i * k + j];
            }
        }
        let mut fields = cholesky_solve(&gram, &wt, k, n)?;
        let ms = fields.iter().map(|v| v * v).sum::<f64>() / (k * n) as f64;
        let scale = 1.0 / ms.sqrt();
        fields.iter_mut().for_each(|v| *v *= scale);
        let norm = (s.height * s.channels) as f64;
        let ramp = ramp_weights(s).into_iter().map(|v| v * norm).collect();
        Ok(ToyWorld {
            fields: Tensor::new(vec![k, n], fields)?,
            config,
            ramp,
        })
    }

    pub fn config(&self) -> &ToyWorldConfig {
        &self.config
    }

    pub fn image_shape(&self) -> ImageShape {
        self.config.image
    }

    pub fn latent_dim(&self) -> usize {
        self.fields.shape()[0]
    }

    pub fn render(&self, latent: &[f64], pose: f64) -> Result<Tensor> {
        let k = self.latent_dim();
        if latent.len() != k {
            return Err(Error::Shape {
                op: "toy render",
                lhs: vec![latent.len()],
                rhs: vec![k],
            });
        }
        let n = self.config.image.numel();
        let amp = self.config.contrast / (k as f64).sqrt();
        let mut field: Vec<f64> = self.ramp.iter().map(|r| self.config.pose_gain * pose * r).collect();
        for (i, z) in latent.iter().enumerate() {
            let row = &self.fields.data()[i * n..(i + 1) * n];
            for (f, p) in field.iter_mut().zip(row) {
                *f += amp * z * p;
            }
        }
        Tensor::new(self.config.image.dims().to_vec(), field.into_iter().map(f64::tanh).collect())
    }

    /// Signed horizontal intensity moment, the toy pose statistic.
    pub fn pose_statistic(&self, image: &Tensor) -> Result<f64> {
        pose_statistic(image, self.config.image)
    }
}

fn ramp_weights(shape: ImageShape) -> Vec<f64> {
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let half = (w as f64 - 1.0) / 2.0;
    let norm = (h * ch) as f64;
    let mut out = vec![0.0; shape.numel()];
    for y in 0..h {
        for x in 0..w {
            let r = if half > 0.0 { (x as f64 - half) / half } else { 0.0 };
            for c in 0..ch {
                out[(y * w + x) * ch + c] = r / norm;
            }
        }
    }
    out
}

/// `Σ ramp(x)·I(y, x, c) / (h·ch)` with `ramp` running from −1 to 1 across
/// the width.
pub fn pose_statistic(image: &Tensor, shape: ImageShape) -> Result<f64> {
    if image.len() != shape.numel() {
        return Err(Error::Shape {
            op: "pose statistic",
            lhs: image.shape().to_vec(),
            rhs: shape.dims().to_vec(),
        });
    }
    Ok(ramp_weights(shape)
        .iter()
        .zip(image.data())
        .map(|(a, b)| a * b)
        .sum())
}

/// Differentiable pose statistic of an image node; returns a scalar node.
pub fn pose_statistic_var(g: &mut Graph, image: Var, shape: ImageShape) -> Result<Var> {
    let n = shape.numel();
    if g.value(image).len() != n {
        return Err(Error::Shape {
            op: "pose statistic",
            lhs: g.value(image).shape().to_vec(),
            rhs: shape.dims().to_vec(),
        });
    }
    let flat = g.reshape(image, &[1, n])?;
    let w = g.constant(Tensor::new(vec![n, 1], ramp_weights(shape))?)?;
    let s = g.matmul(flat, w)?;
    g.reshape(s, &[])
}

/// One rendered toy image with its provenance.
#[derive(Clone, Debug)]
pub struct ToySample {
    pub identity: usize,
    pub pose: f64,
    pub image: Tensor,
    pub feature: Embedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDatasetConfig {
    pub identities: usize,
    pub per_identity: usize,
    /// Standard deviation of per-image latent jitter around the identity code.
    pub intra_std: f64,
    /// Poses are drawn uniformly from `[-pose_range, pose_range]`.
    pub pose_range: f64,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        ToyDatasetConfig {
            identities: 64,
            per_identity: 8,
            intra_std: 0.35,
            pose_range: 1.0,
            seed: 7,
        }
    }
}

/// Latent code of toy identity `i`.
pub fn identity_latent(world: &ToyWorld, seed: u64, identity: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "toy-identity", identity as u64);
    (0..world.latent_dim()).map(|_| r.sample(StandardNormal)).collect()
}

/// Render `identities × per_identity` images and embed them with the oracle.
pub fn toy_dataset(world: &ToyWorld, oracle: &OracleEmbedder, cfg: &ToyDatasetConfig) -> Result<Vec<ToySample>> {
    if cfg.identities == 0 || cfg.per_identity == 0 {
        return Err(Error::Empty("toy dataset"));
    }
    let mut out = Vec::with_capacity(cfg.identities * cfg.per_identity);
    for i in 0..cfg.identities {
        let base = identity_latent(world, cfg.seed, i);
        let mut r = rng::stream(cfg.seed, "toy-image", i as u64);
        for _ in 0..cfg.per_identity {
            let z: Vec<f64> = base
                .iter()
                .map(|b| b + cfg.intra_std * r.sample::<f64, _>(StandardNormal))
                .collect();
            let pose = r.random_range(-cfg.pose_range..=cfg.pose_range);
            let image = world.render(&z, pose)?;
            let feature = oracle.embed(&image)?;
            out.push(ToySample {
                identity: i,
                pose,
                image,
                feature,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::OracleConfig;

    fn world() -> (ToyWorld, OracleEmbedder) {
        let o = OracleEmbedder::new(OracleConfig {
            dim_in: 256,
            channels: 1,
            dim_out: 64,
            gain: 4.0,
            seed: 1,
        })
        .unwrap();
        (ToyWorld::new(ToyWorldConfig::default(), &o).unwrap(), o)
    }

    #[test]
    fn oracle_reads_back_low_contrast_codes() {
        let (w, o) = world();
        let mut cfg = w.config().clone();
        cfg.contrast = 1e-4;
        cfg.pose_gain = 0.0;
        let faint = ToyWorld::new(cfg, &o).unwrap();
        let z = identity_latent(&faint, 3, 0);
        let f = o.embed(&faint.render(&z, 0.0).unwrap()).unwrap();
        assert!(crate::embedding::cosine(f.values(), &z).unwrap() > 0.999_999);
    }

    #[test]
    fn cholesky_solves_small_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let b = [2.0, 1.0];
        let x = cholesky_solve(&a, &b, 2, 1).unwrap();
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-12);
        assert!(cholesky_solve(&[1.0, 1.0, 1.0, 1.0], &b, 2, 1).is_err());
    }

    #[test]
    fn pose_moves_statistic_monotonically() {
        let (w, _) = world();
        let z = identity_latent(&w, 1, 0);
        let stats: Vec<f64> = [-1.0, -0.5, 0.0, 0.5, 1.0]
            .iter()
            .map(|&p| w.pose_statistic(&w.render(&z, p).unwrap()).unwrap())
            .collect();
        assert!(stats.windows(2).all(|s| s[1] > s[0]), "{stats:?}");
    }

    #[test]
    fn pose_statistic_matches_graph() {
        let (w, _) = world();
        let img = w.render(&identity_latent(&w, 1, 3), 0.4).unwrap();
        let mut g = Graph::new();
        let v = g.constant(img.clone()).unwrap();
        let s = pose_statistic_var(&mut g, v, w.image_shape()).unwrap();
        let direct = w.pose_statistic(&img).unwrap();
        assert!((g.value(s).item().unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn mirrored_image_flips_statistic() {
        let shape = ImageShape::new(2, 4, 1);
        let a = Tensor::new(vec![2, 4, 1], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 4, 1], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let sa = pose_statistic(&a, shape).unwrap();
        assert!((sa - 1.0).abs() < 1e-12);
        assert!((pose_statistic(&b, shape).unwrap() + sa).abs() < 1e-12);
    }
}
