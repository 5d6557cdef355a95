use serde::{Deserialize, Serialize};

use super::config::ImageShape;
use crate::embedding::{Embedding, OracleEmbedder};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the perceptual term.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda {} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualConfig {
    /// Number of feature scales; scale `l` pools by `2^(l+1)`.
    pub scales: usize,
    /// Feature channels per scale.
    pub channels: usize,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            scales: 2,
            channels: 8,
            seed: 0x9e37,
        }
    }
}

/// Frozen random multi-scale image features with per-channel weights.
#[derive(Clone, Debug)]
pub struct PerceptualBank {
    image: ImageShape,
    projections: Vec<Tensor>,
    weights: Vec<Tensor>,
}

impl PerceptualBank {
    pub fn new(image: ImageShape, cfg: &PerceptualConfig) -> Result<Self> {
        if cfg.scales == 0 || cfg.channels == 0 {
            return Err(Error::invalid("perceptual bank needs scales and channels"));
        }
        let f = 1 << cfg.scales;
        if image.height % f != 0 || image.width % f != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} too small for {} pooling scales",
                image.height, image.width, cfg.scales
            )));
        }
        let mut r = rng::stream(cfg.seed, "perceptual", 0);
        let mut projections = Vec::new();
        let mut weights = Vec::new();
        for l in 0..cfg.scales {
            let fan_in = image.channels << (2 * (l + 1));
            projections.push(Tensor::randn(&[fan_in, cfg.channels], 1.0 / (fan_in as f64).sqrt(), &mut r));
            weights.push(Tensor::full(&[cfg.channels], 1.0));
        }
        Ok(PerceptualBank {
            image,
            projections,
            weights,
        })
    }

    pub fn scales(&self) -> usize {
        self.projections.len()
    }

    /// Feature map `f_l` of an `[h, w, ch]` image node.
    pub fn feature(&self, g: &mut Graph, image: Var, l: usize) -> Result<Var> {
        let (mut h, mut w) = (self.image.height, self.image.width);
        let mut z = g.reshape(image, &[h * w, self.image.channels])?;
        for _ in 0..=l {
            z = g.space_to_depth(z, h, w)?;
            h /= 2;
            w /= 2;
        }
        let p = g.constant(self.projections[l].clone())?;
        let y = g.matmul(z, p)?;
        g.tanh(y)
    }

    /// `Σ_l ‖w_l ⊙ (f_l(a) − f_l(b))‖²`.
    pub fn distance(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let mut total: Option<Var> = None;
        for l in 0..self.scales() {
            let fa = self.feature(g, a, l)?;
            let fb = self.feature(g, b, l)?;
            let d = g.sub(fa, fb)?;
            let w = g.constant(self.weights[l].clone())?;
            let d = g.mul_row(d, w)?;
            let s = g.sum_squares(d)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        Ok(total.expect("at least one scale"))
    }
}

/// The three reconstruction terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<T> {
    pub rec: T,
    pub id: T,
    pub lpips: T,
    pub total: T,
}

impl LossTerms<Var> {
    pub fn values(&self, g: &Graph) -> LossTerms<f64> {
        let v = |x: Var| g.value(x).item().unwrap_or(f64::NAN);
        LossTerms {
            rec: v(self.rec),
            id: v(self.id),
            lpips: v(self.lpips),
            total: v(self.total),
        }
    }
}

/// Build the loss terms for a reconstruction node against fixed targets.
pub fn loss_graph(
    g: &mut Graph,
    recon: Var,
    oracle: &OracleEmbedder,
    bank: &PerceptualBank,
    im_gt: &Tensor,
    f_gt: &Embedding,
    weights: &LossWeights,
) -> Result<LossTerms<Var>> {
    if g.value(recon).shape() != im_gt.shape() {
        return Err(Error::Shape {
            op: "reconstruction loss",
            lhs: g.value(recon).shape().to_vec(),
            rhs: im_gt.shape().to_vec(),
        });
    }
    let gt = g.constant(im_gt.clone())?;
    let diff = g.sub(recon, gt)?;
    let rec = g.sum_squares(diff)?;

    let e = oracle.embed_var(g, recon)?;
    let target = g.constant(f_gt.to_tensor().reshaped(&[1, f_gt.dim()])?)?;
    let cos = g.cosine(e, target)?;
    let neg = g.scale(cos, -1.0)?;
    let id = g.add_scalar(neg, 1.0)?;

    let lpips = bank.distance(g, recon, gt)?;
    let weighted = g.scale(lpips, weights.lambda)?;
    let total = g.add(rec, id)?;
    let total = g.add(total, weighted)?;
    Ok(LossTerms {
        rec,
        id,
        lpips,
        total,
    })
}

/// Evaluate the loss terms of a finished reconstruction.
pub fn losses(
    recon: &Tensor,
    oracle: &OracleEmbedder,
    bank: &PerceptualBank,
    im_gt: &Tensor,
    f_gt: &Embedding,
    weights: &LossWeights,
) -> Result<LossTerms<f64>> {
    let mut g = Graph::new();
    let r = g.constant(recon.clone())?;
    let terms = loss_graph(&mut g, r, oracle, bank, im_gt, f_gt, weights)?;
    Ok(terms.values(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::OracleConfig;

    fn setup() -> (OracleEmbedder, PerceptualBank, Tensor, Embedding) {
        let oracle = OracleEmbedder::new(OracleConfig {
            dim_in: 256,
            channels: 1,
            dim_out: 16,
            gain: 2.0,
            seed: 3,
        })
        .unwrap();
        let bank = PerceptualBank::new(ImageShape::new(16, 16, 1), &PerceptualConfig::default()).unwrap();
        let mut r = rng::stream(4, "img", 0);
        let img = Tensor::randn(&[16, 16, 1], 0.5, &mut r);
        let f = oracle.embed(&img).unwrap();
        (oracle, bank, img, f)
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let (o, b, img, f) = setup();
        let l = losses(&img, &o, &b, &img, &f, &LossWeights::default()).unwrap();
        assert_eq!(l.rec, 0.0);
        assert_eq!(l.lpips, 0.0);
        assert!(l.id.abs() < 1e-12);
        assert!(l.total.abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_drops_perceptual_term() {
        let (o, b, img, f) = setup();
        let mut r = rng::stream(5, "img", 0);
        let other = Tensor::randn(&[16, 16, 1], 0.5, &mut r);
        let l = losses(&other, &o, &b, &img, &f, &LossWeights { lambda: 0.0 }).unwrap();
        assert!(l.lpips > 0.0);
        assert_eq!(l.total, l.rec + l.id);
        let d = losses(&other, &o, &b, &img, &f, &LossWeights::default()).unwrap();
        assert!((d.total - (d.rec + d.id + 0.2 * d.lpips)).abs() < 1e-12);
        assert!((0.0..=2.0).contains(&d.id));
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(LossWeights { lambda: -0.1 }.validate().is_err());
    }
}
