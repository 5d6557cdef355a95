use serde::{Deserialize, Serialize};

use super::Embedding;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{kernels, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Flattened image size `h*w*ch`.
    pub dim_in: usize,
    /// Image channels; each output row is made mean-free per channel.
    pub channels: usize,
    pub dim_out: usize,
    /// Weight scale; embedding norm ≈ `gain * ‖image‖`.
    pub gain: f64,
    pub seed: u64,
}

/// Frozen random linear identity oracle.
///
/// Each output coordinate is a random pixel projection with the per-channel
/// mean removed, so constant images embed to zero and global brightness does
/// not move identity. The map is never trained.
#[derive(Clone, Debug)]
pub struct OracleEmbedder {
    config: OracleConfig,
    /// `[dim_in, dim_out]`, applied as `image[1×dim_in] · weights`.
    weights: Tensor,
}

impl OracleEmbedder {
    pub fn new(config: OracleConfig) -> Result<Self> {
        let OracleConfig {
            dim_in,
            channels,
            dim_out,
            gain,
            seed,
        } = config;
        if dim_in == 0 || dim_out == 0 || channels == 0 || dim_in % channels != 0 {
            return Err(Error::invalid(format!(
                "oracle dims in={dim_in} out={dim_out} channels={channels}"
            )));
        }
        if !(gain > 0.0) {
            return Err(Error::invalid("oracle gain must be positive"));
        }
        let mut r = rng::stream(seed, "oracle", 0);
        // rows of `proj` are output coordinates
        let proj = Tensor::randn(&[dim_out, dim_in], 1.0, &mut r);
        let mut proj = proj.into_data();
        for row in proj.chunks_exact_mut(dim_in) {
            for ch in 0..channels {
                let idx = (ch..dim_in).step_by(channels);
                let mean = idx.clone().map(|i| row[i]).sum::<f64>() / (dim_in / channels) as f64;
                for i in idx {
                    row[i] -= mean;
                }
            }
            let n = kernels::dot(row, row).sqrt();
            for v in row.iter_mut() {
                *v *= gain / n;
            }
        }
        let mut weights = vec![0.0; dim_in * dim_out];
        for o in 0..dim_out {
            for i in 0..dim_in {
                weights[i * dim_out + o] = proj[o * dim_in + i];
            }
        }
        Ok(OracleEmbedder {
            config,
            weights: Tensor::new(vec![dim_in, dim_out], weights)?,
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn dim_in(&self) -> usize {
        self.config.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.config.dim_out
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn embed(&self, image: &Tensor) -> Result<Embedding> {
        if image.len() != self.dim_in() {
            return Err(Error::Shape {
                op: "embed",
                lhs: image.shape().to_vec(),
                rhs: vec![self.dim_in()],
            });
        }
        let m = self.dim_out();
        let mut out = vec![0.0; m];
        kernels::matmul_acc(image.data(), self.weights.data(), &mut out, 1, self.dim_in(), m);
        Embedding::new(out)
    }

    /// Differentiable embedding of an image node; returns a `[1, dim_out]` node.
    pub fn embed_var(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let n = g.value(image).len();
        if n != self.dim_in() {
            return Err(Error::Shape {
                op: "embed",
                lhs: g.value(image).shape().to_vec(),
                rhs: vec![self.dim_in()],
            });
        }
        let flat = g.reshape(image, &[1, n])?;
        let w = g.constant(self.weights.clone())?;
        g.matmul(flat, w)
    }

    /// Quality evaluator: magnitude of the embedding.
    pub fn quality(&self, image: &Tensor) -> Result<f64> {
        Ok(self.embed(image)?.norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle() -> OracleEmbedder {
        OracleEmbedder::new(OracleConfig {
            dim_in: 32,
            channels: 2,
            dim_out: 8,
            gain: 1.0,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn zero_image_embeds_to_zero() {
        let e = oracle().embed(&Tensor::zeros(&[4, 4, 2])).unwrap();
        assert!(e.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_embeds_to_zero() {
        let e = oracle().embed(&Tensor::full(&[4, 4, 2], 0.7)).unwrap();
        assert!(e.norm() < 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let img = Tensor::randn(&[32], 1.0, &mut rng::stream(1, "img", 0));
        assert_eq!(oracle().embed(&img).unwrap(), oracle().embed(&img).unwrap());
    }

    #[test]
    fn graph_and_direct_paths_agree() {
        let o = oracle();
        let img = Tensor::randn(&[32], 1.0, &mut rng::stream(1, "img", 1));
        let mut g = Graph::new();
        let v = g.constant(img.clone()).unwrap();
        let e = o.embed_var(&mut g, v).unwrap();
        assert_eq!(g.value(e).data(), o.embed(&img).unwrap().values());
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(oracle().embed(&Tensor::zeros(&[31])).is_err());
    }
}
