use rand::Rng;

use super::config::{GeneratorConfig, DECODER_STAGES};
use super::mask::{MaskConfig, RowMask};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Fill-in condition for masked rows.
#[derive(Clone, Copy, Debug)]
pub enum Condition {
    /// Raw feature `[1, dim]`, passed through the model's condition projector.
    Feature(Var),
    /// Already a `[1, channels]` row, e.g. from a landmark encoder.
    Projected(Var),
}

/// Low-rank update of one block's token-mixing matrix:
/// `Mix·X + scale·B·(A·X)` with `A: [rank, tokens]`, `B: [tokens, rank]`.
#[derive(Clone, Copy, Debug)]
pub struct MixAdapter {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Row-masked feature autoencoder: expansion to a token map, token-mixing
/// encoder, condition fill-in and a four-stage upsampling decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    mask: MaskConfig,
    params: Vec<Tensor>,
}

// indices into the parameter list, see GeneratorConfig::layer_shapes
const EXPAND1: usize = 0;
const EXPAND2: usize = 2;
const COND: usize = 4;
const BLOCKS: usize = 6;

impl GeneratorModel {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, mask: MaskConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        mask.validate()?;
        let last_stage = format!("dec{}.w", DECODER_STAGES - 1);
        let params = config
            .layer_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else if name.ends_with("mix.w") {
                    // near-identity mixing keeps early tokens distinct
                    let r = shape[0];
                    let mut t = Tensor::randn(&shape, 0.5 / (r as f64).sqrt(), rng);
                    for i in 0..r {
                        t.data_mut()[i * r + i] += 0.5;
                    }
                    t
                } else if name == last_stage {
                    // small output layer: training starts from a near-blank image
                    Tensor::randn(&shape, 0.1 / (shape[0] as f64).sqrt(), rng)
                } else {
                    Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), rng)
                }
            })
            .collect();
        Ok(GeneratorModel {
            config,
            mask,
            params,
        })
    }

    pub fn from_params(config: GeneratorConfig, mask: MaskConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        mask.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, s), p) in shapes.iter().zip(&params) {
            if p.shape() != s.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name}: shape {:?}, expected {s:?}",
                    p.shape()
                )));
            }
            if !p.is_finite() {
                return Err(Error::NonFinite { op: "generator parameters" });
            }
        }
        Ok(GeneratorModel {
            config,
            mask,
            params,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn mask_config(&self) -> &MaskConfig {
        &self.mask
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Index of block `b`'s token-mixing matrix in the parameter list.
    pub fn mix_index(&self, block: usize) -> usize {
        BLOCKS + 4 * block + 2
    }

    /// Put every parameter on the graph, tracked for gradients or not.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| g.input(p.clone(), trainable))
            .collect()
    }

    /// Project a `[1, dim]` feature to a `[1, channels]` condition row.
    pub fn project_condition(&self, g: &mut Graph, vars: &[Var], feature: Var) -> Result<Var> {
        let x = g.scale(feature, self.config.input_scale)?;
        let y = g.matmul(x, vars[COND])?;
        g.add_row(y, vars[COND + 1])
    }

    /// Full forward pass on bound parameters. `f_im` is `[1, dim]`; the
    /// result is an image node of shape `[h, w, ch]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        f_im: Var,
        condition: Condition,
        mask: &RowMask,
        adapters: Option<&[MixAdapter]>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (r, c) = cfg.token_map_shape();
        if mask.tokens() != r {
            return Err(Error::invalid(format!(
                "row mask over {} tokens for a {r}-token model",
                mask.tokens()
            )));
        }
        if let Some(a) = adapters {
            if a.len() != cfg.blocks {
                return Err(Error::invalid("one adapter per encoder block required"));
            }
        }
        let x = g.scale(f_im, cfg.input_scale)?;
        let h = g.matmul(x, vars[EXPAND1])?;
        let h = g.add_row(h, vars[EXPAND1 + 1])?;
        let t = g.matmul(h, vars[EXPAND2])?;
        let t = g.add_row(t, vars[EXPAND2 + 1])?;
        let mut t = g.reshape(t, &[r, c])?;

        let keep = if mask.is_empty() {
            None
        } else {
            Some(g.constant(Tensor::new(vec![r, c], mask.keep_matrix(c))?)?)
        };
        if let Some(k) = keep {
            t = g.mul(t, k)?;
        }
        for b in 0..cfg.blocks {
            let base = BLOCKS + 4 * b;
            let u = g.matmul(t, vars[base])?;
            let u = g.add_row(u, vars[base + 1])?;
            let u = g.silu(u)?;
            t = g.add(t, u)?;
            if let Some(k) = keep {
                t = g.mul(t, k)?;
            }
            let mut m = g.matmul(vars[base + 2], t)?;
            if let Some(ad) = adapters {
                let ad = ad[b];
                let ax = g.matmul(ad.a, t)?;
                let bax = g.matmul(ad.b, ax)?;
                let bax = g.scale(bax, ad.scale)?;
                m = g.add(m, bax)?;
            }
            let m = g.add_row(m, vars[base + 3])?;
            let m = g.silu(m)?;
            t = g.add(t, m)?;
            if let Some(k) = keep {
                t = g.mul(t, k)?;
            }
        }

        if !mask.is_empty() {
            let cond = match condition {
                Condition::Feature(f) => self.project_condition(g, vars, f)?,
                Condition::Projected(p) => p,
            };
            if g.value(cond).shape() != [1, c] {
                return Err(Error::Shape {
                    op: "condition fill",
                    lhs: g.value(cond).shape().to_vec(),
                    rhs: vec![1, c],
                });
            }
            let col = g.constant(Tensor::new(vec![r, 1], mask.drop_column())?)?;
            let fill = g.matmul(col, cond)?;
            t = g.add(t, fill)?;
        }

        let (mut gh, mut gw) = cfg.decoder_grid();
        let mut z = g.reshape(t, &[gh * gw, cfg.decoder_input_channels()])?;
        let dec = BLOCKS + 4 * cfg.blocks;
        for s in 0..DECODER_STAGES {
            let y = g.matmul(z, vars[dec + 2 * s])?;
            let y = g.add_row(y, vars[dec + 2 * s + 1])?;
            z = g.depth_to_space(y, gh, gw)?;
            gh *= 2;
            gw *= 2;
        }
        g.reshape(z, &cfg.image.dims())
    }

    /// Generate one image with an explicit row mask.
    pub fn forward_masked(&self, f_im: &Embedding, condition: &Embedding, mask: &RowMask) -> Result<Tensor> {
        self.check_dim(f_im)?;
        self.check_dim(condition)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let f = g.constant(f_im.to_tensor().reshaped(&[1, self.config.dim])?)?;
        let c = g.constant(condition.to_tensor().reshaped(&[1, self.config.dim])?)?;
        let out = self.forward_graph(&mut g, &vars, f, Condition::Feature(c), mask, None)?;
        Ok(g.value(out).clone())
    }

    /// Generate one image, dropping `⌈mask_ratio·r⌉` rows drawn from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        f_im: &Embedding,
        condition: &Embedding,
        mask_ratio: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        let mask = RowMask::sample(mask_ratio, self.config.tokens, rng)?;
        self.forward_masked(f_im, condition, &mask)
    }

    /// Unmasked generation, as used at inference time.
    pub fn generate(&self, f_im: &Embedding) -> Result<Tensor> {
        self.forward_masked(f_im, f_im, &RowMask::none(self.config.tokens))
    }

    fn check_dim(&self, e: &Embedding) -> Result<()> {
        if e.dim() != self.config.dim {
            return Err(Error::Shape {
                op: "generator input",
                lhs: vec![e.dim()],
                rhs: vec![self.config.dim],
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn model() -> GeneratorModel {
        let mut r = rng::stream(1, "model", 0);
        GeneratorModel::new(GeneratorConfig::toy(), MaskConfig::default(), &mut r).unwrap()
    }

    fn feature(seed: u64) -> Embedding {
        let mut r = rng::stream(seed, "feature", 0);
        Embedding::new(Tensor::randn(&[64], 2.5, &mut r).into_data()).unwrap()
    }

    #[test]
    fn output_has_image_shape() {
        let m = model();
        let img = m.generate(&feature(0)).unwrap();
        assert_eq!(img.shape(), &[16, 16, 1]);
        assert!(img.is_finite());
    }

    #[test]
    fn unmasked_forward_ignores_condition() {
        let m = model();
        let f = feature(0);
        let none = RowMask::none(8);
        let a = m.forward_masked(&f, &feature(1), &none).unwrap();
        let b = m.forward_masked(&f, &feature(2), &none).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fully_masked_forward_ignores_input() {
        let m = model();
        let all = RowMask::from_dropped(8, (0..8).collect()).unwrap();
        let c = feature(5);
        let a = m.forward_masked(&feature(1), &c, &all).unwrap();
        let b = m.forward_masked(&feature(2), &c, &all).unwrap();
        assert_eq!(a.data(), b.data());
        let d = m.forward_masked(&feature(1), &feature(6), &all).unwrap();
        assert!(a.max_abs_diff(&d) > 0.0);
    }

    #[test]
    fn partial_mask_uses_condition() {
        let m = model();
        let half = RowMask::from_dropped(8, vec![1, 4, 6]).unwrap();
        let f = feature(1);
        let a = m.forward_masked(&f, &feature(3), &half).unwrap();
        let b = m.forward_masked(&f, &feature(4), &half).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn wrong_dimension_rejected() {
        let m = model();
        let bad = Embedding::new(vec![1.0; 10]).unwrap();
        assert!(m.generate(&bad).is_err());
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = model();
        let mut p = m.params().to_vec();
        p[0] = Tensor::zeros(&[2, 2]);
        assert!(GeneratorModel::from_params(GeneratorConfig::toy(), MaskConfig::default(), p).is_err());
    }
}
