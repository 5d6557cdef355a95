use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_graph, LossTerms, LossWeights, PerceptualBank};
use super::mask::{sample_mask_ratio, MaskConfig, RowMask};
use super::model::{Condition, GeneratorModel};
use crate::embedding::{Embedding, OracleEmbedder};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor};

/// A supervised reconstruction pair.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub f_im: Embedding,
    pub im_gt: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    #[serde(default)]
    pub weights: LossWeights,
    pub seed: u64,
    /// Worker threads for the per-sample forward/backward passes.
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-3,
            batch: 16,
            weights: LossWeights::default(),
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr {} must be >= 0", self.lr)));
        }
        self.weights.validate()
    }
}

/// Batch-mean loss terms at one step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub terms: LossTerms<f64>,
}

/// One sample of a step: which pair, and which rows are masked.
#[derive(Clone, Debug)]
pub(crate) struct Draw {
    pub index: usize,
    pub mask: RowMask,
}

/// Per-sample loss terms and summed parameter gradients of a batch.
pub(crate) struct BatchOutput {
    pub terms: Vec<LossTerms<f64>>,
    pub grads: Vec<Tensor>,
}

/// Samples per gradient chunk. Chunks are the unit of work for worker
/// threads and are merged in index order, so the summed gradient does not
/// depend on the worker count.
pub(crate) const GRAD_CHUNK: usize = 4;

/// Run `f` over fixed-size chunks of `draws` on up to `workers` threads and
/// sum the per-chunk outputs in chunk order.
pub(crate) fn fan_out<F>(draws: &[Draw], workers: usize, f: F) -> Result<BatchOutput>
where
    F: Fn(&[Draw]) -> Result<BatchOutput> + Sync,
{
    let chunks: Vec<&[Draw]> = draws.chunks(GRAD_CHUNK).collect();
    let workers = workers.clamp(1, chunks.len().max(1));
    let outputs: Vec<Result<BatchOutput>> = if workers == 1 {
        chunks.iter().map(|c| f(c)).collect()
    } else {
        let mut slots: Vec<Option<Result<BatchOutput>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    let f = &f;
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(workers)
                            .map(|i| (i, f(chunks[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, out) in h.join().expect("training worker panicked") {
                    slots[i] = Some(out);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk processed")).collect()
    };
    let mut merged: Option<BatchOutput> = None;
    for out in outputs {
        let out = out?;
        merged = Some(match merged {
            None => out,
            Some(mut m) => {
                for (a, b) in m.grads.iter_mut().zip(&out.grads) {
                    a.axpy(1.0, b);
                }
                m.terms.extend(out.terms);
                m
            }
        });
    }
    merged.ok_or(Error::Empty("batch"))
}

pub(crate) fn mean_terms(terms: &[LossTerms<f64>]) -> LossTerms<f64> {
    let n = terms.len().max(1) as f64;
    let mut m = LossTerms {
        rec: 0.0,
        id: 0.0,
        lpips: 0.0,
        total: 0.0,
    };
    for t in terms {
        m.rec += t.rec / n;
        m.id += t.id / n;
        m.lpips += t.lpips / n;
        m.total += t.total / n;
    }
    m
}

pub(crate) fn draw_batch<R: Rng + ?Sized>(
    model: &GeneratorModel,
    mask: &MaskConfig,
    len: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Draw>> {
    let idx: Vec<usize> = if batch <= len {
        rand::seq::index::sample(rng, len, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..len)).collect()
    };
    idx.into_iter()
        .map(|index| {
            let ratio = sample_mask_ratio(mask, rng);
            Ok(Draw {
                index,
                mask: RowMask::sample(ratio, model.config().tokens, rng)?,
            })
        })
        .collect()
}

fn generator_batch(
    model: &GeneratorModel,
    oracle: &OracleEmbedder,
    bank: &PerceptualBank,
    data: &[TrainingPair],
    weights: &LossWeights,
    draws: &[Draw],
    with_grads: bool,
) -> Result<BatchOutput> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, with_grads)?;
    let dim = model.config().dim;
    let mut terms = Vec::with_capacity(draws.len());
    let mut total = None;
    for d in draws {
        let pair = &data[d.index];
        let f = g.constant(pair.f_im.to_tensor().reshaped(&[1, dim])?)?;
        let recon = model.forward_graph(&mut g, &vars, f, Condition::Feature(f), &d.mask, None)?;
        let t = loss_graph(&mut g, recon, oracle, bank, &pair.im_gt, &pair.f_im, weights)?;
        terms.push(t.values(&g));
        total = Some(match total {
            None => t.total,
            Some(acc) => g.add(acc, t.total)?,
        });
    }
    let grads = match (with_grads, total) {
        (true, Some(total)) => {
            let mut gr = g.backward(total)?;
            vars.iter()
                .zip(model.params())
                .map(|(v, p)| gr.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect()
        }
        _ => Vec::new(),
    };
    Ok(BatchOutput { terms, grads })
}

fn check_data(model: &GeneratorModel, data: &[TrainingPair]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let dims = model.config().image.dims();
    for p in data {
        if p.f_im.dim() != model.config().dim || p.im_gt.shape() != dims {
            return Err(Error::Shape {
                op: "training pair",
                lhs: vec![p.f_im.dim(), p.im_gt.len()],
                rhs: vec![model.config().dim, model.config().image.numel()],
            });
        }
    }
    Ok(())
}

/// Plain gradient descent on the batch-mean total loss. Each step samples a
/// batch, a mask ratio and masked rows per sample, and uses the input
/// feature itself as the fill-in condition.
pub fn train(
    model: &mut GeneratorModel,
    oracle: &OracleEmbedder,
    bank: &PerceptualBank,
    data: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_data(model, data)?;
    let mut r = rng::stream(cfg.seed, "train-gen", 0);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let draws = draw_batch(model, model.mask_config(), data.len(), cfg.batch, &mut r)?;
        let out = {
            let m: &GeneratorModel = model;
            fan_out(&draws, cfg.workers, |chunk| {
                generator_batch(m, oracle, bank, data, &cfg.weights, chunk, true)
            })
        };
        let out = match out {
            Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step }),
            other => other?,
        };
        let terms = mean_terms(&out.terms);
        if !terms.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        trace.push(LossRecord { step, terms });
        let scale = cfg.lr / draws.len() as f64;
        for (p, gr) in model.params_mut().iter_mut().zip(&out.grads) {
            p.axpy(-scale, gr);
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { step });
        }
        if step % 100 == 0 {
            log::debug!("train-gen step {step}: total {:.4}", terms.total);
        }
    }
    Ok(trace)
}

/// Mean loss over the whole dataset with masks fixed by `seed`, so two
/// models can be compared on identical draws.
pub fn evaluate(
    model: &GeneratorModel,
    oracle: &OracleEmbedder,
    bank: &PerceptualBank,
    data: &[TrainingPair],
    weights: &LossWeights,
    seed: u64,
) -> Result<LossTerms<f64>> {
    check_data(model, data)?;
    let mut r = rng::stream(seed, "eval-gen", 0);
    let draws: Vec<Draw> = (0..data.len())
        .map(|index| {
            let ratio = sample_mask_ratio(model.mask_config(), &mut r);
            Ok(Draw {
                index,
                mask: RowMask::sample(ratio, model.config().tokens, &mut r)?,
            })
        })
        .collect::<Result<_>>()?;
    let out = generator_batch(model, oracle, bank, data, weights, &draws, false)?;
    Ok(mean_terms(&out.terms))
}

/// Loss trace as CSV: `step,L_rec,L_id,L_lpips,L_total`.
pub fn write_trace_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "step,L_rec,L_id,L_lpips,L_total").expect("write to vec");
    for r in trace {
        let t = r.terms;
        writeln!(buf, "{},{},{},{},{}", r.step, t.rec, t.id, t.lpips, t.total).expect("write to vec");
    }
    crate::io::write_atomic(path, &buf)
}
