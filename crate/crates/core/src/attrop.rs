//! Gradient search over a generator input toward target quality and pose
//! while keeping the generated identity close to a reference vector.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, OracleEmbedder};
use crate::error::{Error, Result};
use crate::generator::toy::pose_statistic_var;
use crate::generator::{Condition, GeneratorModel, ImageShape, RowMask};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttrOpConfig {
    /// Target quality `Q`.
    pub quality: f64,
    /// Target pose `P`, in the pose evaluator's units.
    pub pose: f64,
    /// Iterations `T`.
    pub iterations: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    /// Hard cap on iterations regardless of `T`.
    #[serde(default = "default_cap")]
    pub cap: usize,
    /// Stop once the loss falls to or below this value.
    #[serde(default)]
    pub stop_loss: Option<f64>,
}

fn default_step() -> f64 {
    1e-2
}

fn default_cap() -> usize {
    30
}

impl AttrOpConfig {
    pub fn new(quality: f64, pose: f64, iterations: usize) -> Self {
        AttrOpConfig {
            quality,
            pose,
            iterations,
            step: default_step(),
            cap: default_cap(),
            stop_loss: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.cap == 0 {
            return Err(Error::invalid("iterations and cap must be at least 1"));
        }
        if !(self.step >= 0.0 && self.step.is_finite()) {
            return Err(Error::invalid(format!("step {} must be >= 0", self.step)));
        }
        if !self.quality.is_finite() || !self.pose.is_finite() {
            return Err(Error::invalid("non-finite attribute target"));
        }
        Ok(())
    }

    pub fn effective_iterations(&self) -> usize {
        self.iterations.min(self.cap)
    }
}

/// Differentiable map from an input vector `[1, dim]` to an image node.
pub trait ImageModel {
    fn dim(&self) -> usize;
    fn image_var(&self, g: &mut Graph, v: Var) -> Result<Var>;
}

/// Generator at inference: a fixed row mask, with the input doubling as the
/// fill-in condition.
#[derive(Clone, Debug)]
pub struct Inference<'a> {
    pub model: &'a GeneratorModel,
    pub mask: RowMask,
}

impl<'a> Inference<'a> {
    pub fn new(model: &'a GeneratorModel, mask_ratio: f64) -> Result<Self> {
        Ok(Inference {
            model,
            mask: RowMask::leading(mask_ratio, model.config().tokens)?,
        })
    }

    pub fn generate(&self, v: &Embedding) -> Result<Tensor> {
        self.model.forward_masked(v, v, &self.mask)
    }
}

impl ImageModel for Inference<'_> {
    fn dim(&self) -> usize {
        self.model.config().dim
    }

    fn image_var(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let vars = self.model.bind(g, false)?;
        self.model
            .forward_graph(g, &vars, v, Condition::Feature(v), &self.mask, None)
    }
}

/// The three condition models of the search.
pub trait Evaluators {
    /// Identity feature `[1, d]`.
    fn identity(&self, g: &mut Graph, image: Var) -> Result<Var>;
    /// Scalar quality.
    fn quality(&self, g: &mut Graph, image: Var) -> Result<Var>;
    /// Scalar signed pose.
    fn pose(&self, g: &mut Graph, image: Var) -> Result<Var>;
}

/// Oracle embedding for identity, embedding magnitude for quality and the
/// horizontal intensity moment for pose.
#[derive(Clone, Copy, Debug)]
pub struct ToyEvaluators<'a> {
    pub oracle: &'a OracleEmbedder,
    pub image: ImageShape,
}

impl Evaluators for ToyEvaluators<'_> {
    fn identity(&self, g: &mut Graph, image: Var) -> Result<Var> {
        self.oracle.embed_var(g, image)
    }

    fn quality(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let e = self.oracle.embed_var(g, image)?;
        g.norm(e)
    }

    fn pose(&self, g: &mut Graph, image: Var) -> Result<Var> {
        pose_statistic_var(g, image, self.image)
    }
}

/// `[1 − cos(M_FR(im), v_id)] + [Q − M_quality(im)] + |P − |M_pose(im)||`.
pub fn attrop_loss_graph<E: Evaluators + ?Sized>(
    g: &mut Graph,
    image: Var,
    v_id: &Embedding,
    evals: &E,
    cfg: &AttrOpConfig,
) -> Result<Var> {
    let f = evals.identity(g, image)?;
    let target = g.constant(v_id.to_tensor().reshaped(&[1, v_id.dim()])?)?;
    let cos = g.cosine(f, target)?;
    let neg = g.scale(cos, -1.0)?;
    let id = g.add_scalar(neg, 1.0)?;

    let q = evals.quality(g, image)?;
    let q = g.scale(q, -1.0)?;
    let q = g.add_scalar(q, cfg.quality)?;

    let p = evals.pose(g, image)?;
    let p = g.abs(p)?;
    let p = g.scale(p, -1.0)?;
    let p = g.add_scalar(p, cfg.pose)?;
    let p = g.abs(p)?;

    let sum = g.add(id, q)?;
    let sum = g.add(sum, p)?;
    g.reshape(sum, &[])
}

pub fn attrop_loss<E: Evaluators + ?Sized>(
    image: &Tensor,
    v_id: &Embedding,
    evals: &E,
    cfg: &AttrOpConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let im = g.constant(image.clone())?;
    let l = attrop_loss_graph(&mut g, im, v_id, evals, cfg)?;
    Ok(g.value(l).item().expect("scalar loss"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttrOpOutcome {
    pub vector: Embedding,
    /// Loss before each update.
    pub trace: Vec<f64>,
    /// Loss of the returned vector.
    pub final_loss: f64,
}

fn loss_and_grad<M: ImageModel + ?Sized, E: Evaluators + ?Sized>(
    v: &[f64],
    v_id: &Embedding,
    model: &M,
    evals: &E,
    cfg: &AttrOpConfig,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, v.len()], v.to_vec())?, want_grad)?;
    let im = model.image_var(&mut g, x)?;
    let l = attrop_loss_graph(&mut g, im, v_id, evals, cfg)?;
    let loss = g.value(l).item().expect("scalar loss");
    if !want_grad {
        return Ok((loss, None));
    }
    let mut grads = g.backward(l)?;
    Ok((loss, grads.take(x)))
}

/// Plain gradient descent on the input vector. Runs `min(T, cap)`
/// iterations unless `stop_loss` is reached first.
pub fn attrop<M: ImageModel + ?Sized, E: Evaluators + ?Sized>(
    v_id: &Embedding,
    v_im: &Embedding,
    model: &M,
    evals: &E,
    cfg: &AttrOpConfig,
) -> Result<AttrOpOutcome> {
    cfg.validate()?;
    if v_id.dim() != model.dim() || v_im.dim() != model.dim() {
        return Err(Error::Shape {
            op: "attrop",
            lhs: vec![v_id.dim(), v_im.dim()],
            rhs: vec![model.dim()],
        });
    }
    let mut v = v_im.values().to_vec();
    let mut trace = Vec::with_capacity(cfg.effective_iterations());
    for iteration in 0..cfg.effective_iterations() {
        let (loss, grad) = match loss_and_grad(&v, v_id, model, evals, cfg, true) {
            Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteUpdate { iteration }),
            other => other?,
        };
        trace.push(loss);
        if cfg.stop_loss.is_some_and(|s| loss <= s) {
            break;
        }
        let grad = grad.unwrap_or_else(|| Tensor::zeros(&[1, v.len()]));
        for (x, d) in v.iter_mut().zip(grad.data()) {
            *x -= cfg.step * d;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteUpdate { iteration });
        }
    }
    let (final_loss, _) = loss_and_grad(&v, v_id, model, evals, cfg, false)?;
    Ok(AttrOpOutcome {
        vector: Embedding::new(v)?,
        trace,
        final_loss,
    })
}

/// Trace CSV: `iteration,loss`.
pub fn write_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "iteration,loss").expect("write to vec");
    for (i, l) in trace.iter().enumerate() {
        writeln!(buf, "{i},{l}").expect("write to vec");
    }
    crate::io::write_atomic(path, &buf)
}

/// Linear map from degrees to toy pose units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseScale {
    pub units_per_degree: f64,
}

impl Default for PoseScale {
    fn default() -> Self {
        PoseScale {
            units_per_degree: 1.0 / 16.0,
        }
    }
}

impl PoseScale {
    pub fn units(&self, degrees: f64) -> f64 {
        degrees * self.units_per_degree
    }
}

/// Yaw targets, in degrees, of the pose-diverse image base.
pub const YAW_TARGETS: [f64; 6] = [30.0, 40.0, 50.0, 60.0, 70.0, 80.0];

#[cfg(test)]
mod tests {
    use super::*;

    /// Identity generator with quadratic quality and pose around `a`.
    struct Quadratic {
        a: Vec<f64>,
        c: f64,
        p: f64,
    }

    struct Passthrough(usize);

    impl ImageModel for Passthrough {
        fn dim(&self) -> usize {
            self.0
        }
        fn image_var(&self, _g: &mut Graph, v: Var) -> Result<Var> {
            Ok(v)
        }
    }

    impl Quadratic {
        fn dist(&self, g: &mut Graph, image: Var) -> Result<Var> {
            let a = g.constant(Tensor::new(vec![1, self.a.len()], self.a.clone())?)?;
            let d = g.sub(image, a)?;
            g.sum_squares(d)
        }
    }

    impl Evaluators for Quadratic {
        fn identity(&self, _g: &mut Graph, image: Var) -> Result<Var> {
            Ok(image)
        }
        fn quality(&self, g: &mut Graph, image: Var) -> Result<Var> {
            let d = self.dist(g, image)?;
            let d = g.scale(d, -1.0)?;
            g.add_scalar(d, self.c)
        }
        fn pose(&self, g: &mut Graph, image: Var) -> Result<Var> {
            let d = self.dist(g, image)?;
            let d = g.scale(d, -1.0)?;
            g.add_scalar(d, self.p)
        }
    }

    fn setup() -> (Embedding, Quadratic, AttrOpConfig) {
        let v_id = Embedding::new(vec![3.0, -1.0, 2.0, 0.5]).unwrap();
        let s = 2.0;
        let a = v_id.normalized().unwrap().scaled(s).into_values();
        let eval = Quadratic { a, c: 5.0, p: 1.5 };
        let mut cfg = AttrOpConfig::new(7.0, 1.5, 2000);
        cfg.cap = 2000;
        cfg.step = 0.05;
        (v_id, eval, cfg)
    }

    #[test]
    fn zero_step_leaves_vector_unchanged() {
        let (v_id, eval, mut cfg) = setup();
        cfg.step = 0.0;
        cfg.cap = 10;
        let start = Embedding::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let out = attrop(&v_id, &start, &Passthrough(4), &eval, &cfg).unwrap();
        assert_eq!(out.vector, start);
        assert_eq!(out.trace.len(), 10);
        assert!(out.trace.iter().all(|&l| l == out.trace[0]));
    }

    #[test]
    fn quadratic_reaches_analytic_minimum() {
        let (v_id, eval, cfg) = setup();
        let start = Embedding::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let out = attrop(&v_id, &start, &Passthrough(4), &eval, &cfg).unwrap();
        let minimum = cfg.quality - eval.c;
        assert!(out.final_loss < out.trace[0]);
        assert!((out.final_loss - minimum).abs() < 1e-3, "{} vs {minimum}", out.final_loss);
    }

    #[test]
    fn satisfied_targets_give_zero_loss() {
        let (v_id, eval, _) = setup();
        let cfg = AttrOpConfig::new(eval.c, eval.p, 1);
        let im = Tensor::new(vec![1, 4], eval.a.clone()).unwrap();
        assert!(attrop_loss(&im, &v_id, &eval, &cfg).unwrap().abs() < 1e-12);
        let over = AttrOpConfig::new(eval.c - 1.0, eval.p, 1);
        assert!(attrop_loss(&im, &v_id, &eval, &over).unwrap() < 0.0);
    }

    #[test]
    fn trace_length_is_capped() {
        let (v_id, eval, mut cfg) = setup();
        cfg.iterations = 50;
        cfg.cap = 30;
        cfg.step = 0.01;
        let start = Embedding::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(attrop(&v_id, &start, &Passthrough(4), &eval, &cfg).unwrap().trace.len(), 30);
        cfg.iterations = 7;
        assert_eq!(attrop(&v_id, &start, &Passthrough(4), &eval, &cfg).unwrap().trace.len(), 7);
    }

    #[test]
    fn huge_step_reports_iteration() {
        let (v_id, eval, mut cfg) = setup();
        cfg.step = 1e300;
        let start = Embedding::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let err = attrop(&v_id, &start, &Passthrough(4), &eval, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteUpdate { .. }), "{err}");
    }
}
