//! Pose control through low-rank adapters on the token-mixing matrices and
//! a landmark-image condition encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, OracleEmbedder};
use crate::error::{Error, Result};
use crate::generator::toy::{toy_dataset, ToyDatasetConfig, ToyWorld};
use crate::generator::{
    draw_batch, fan_out, loss_graph, mean_terms, BatchOutput, Condition, Draw, GeneratorModel, ImageShape,
    LossRecord, MaskConfig, MixAdapter, PerceptualBank, RowMask, Section, TrainConfig,
};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

/// Five landmark points in normalized `(x, y)` image coordinates: two eyes,
/// nose, two mouth corners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkLayout {
    pub name: String,
    pub points: [[f64; 2]; 5],
}

impl LandmarkLayout {
    /// Layout for a signed pose in `[-1, 1]`; the nose moves furthest.
    pub fn for_pose(pose: f64) -> Self {
        let p = pose.clamp(-1.0, 1.0);
        let (face, nose) = (0.15 * p, 0.3 * p);
        LandmarkLayout {
            name: format!("pose{p:+.3}"),
            points: [
                [0.3 + face, 0.35],
                [0.7 + face, 0.35],
                [0.5 + nose, 0.55],
                [0.35 + face, 0.75],
                [0.65 + face, 0.75],
            ],
        }
    }

    pub fn frontal() -> Self {
        LandmarkLayout {
            name: "frontal".into(),
            ..Self::for_pose(0.0)
        }
    }

    pub fn profile_left() -> Self {
        LandmarkLayout {
            name: "profile-left".into(),
            ..Self::for_pose(-1.0)
        }
    }

    pub fn profile_right() -> Self {
        LandmarkLayout {
            name: "profile-right".into(),
            ..Self::for_pose(1.0)
        }
    }

    /// The two profile templates.
    pub fn profiles() -> Vec<Self> {
        vec![Self::profile_left(), Self::profile_right()]
    }
}

/// Single-channel grid with five lit landmark points.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LandmarkImage {
    /// Rasterize a layout. With `blur`, the 4-neighbours of each point are
    /// set to 0.5.
    pub fn render(layout: &LandmarkLayout, height: usize, width: usize, blur: bool) -> Result<Self> {
        let mut data = vec![0.0; height * width];
        for &[x, y] in &layout.points {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::invalid(format!("landmark ({x}, {y}) outside the unit square")));
            }
            let px = (x * (width - 1) as f64).round() as usize;
            let py = (y * (height - 1) as f64).round() as usize;
            data[py * width + px] = 1.0;
        }
        let sharp = LandmarkImage { height, width, data };
        let regions = sharp.lit_regions();
        if regions != 5 {
            return Err(Error::invalid(format!(
                "layout {} gives {regions} separate points on a {height}x{width} grid",
                layout.name
            )));
        }
        Ok(if blur { sharp.blurred() } else { sharp })
    }

    /// Wrap raw pixels, which must be 0 or 1 and form five lit regions.
    pub fn from_pixels(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                op: "landmark image",
                lhs: vec![data.len()],
                rhs: vec![height, width],
            });
        }
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("landmark pixels must be 0 or 1"));
        }
        let img = LandmarkImage { height, width, data };
        match img.lit_regions() {
            5 => Ok(img),
            n => Err(Error::invalid(format!("{n} lit regions, expected 5"))),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// 8-connected components of pixels equal to 1.
    pub fn lit_regions(&self) -> usize {
        let (h, w) = (self.height, self.width);
        let mut seen = vec![false; h * w];
        let mut count = 0;
        for start in 0..h * w {
            if seen[start] || self.data[start] != 1.0 {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if !seen[j] && self.data[j] == 1.0 {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        count
    }

    fn blurred(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = self.data.clone();
        for y in 0..h {
            for x in 0..w {
                if self.data[y * w + x] != 1.0 {
                    continue;
                }
                let near = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in near {
                    if ny < h && nx < w && out[ny * w + nx] < 0.5 {
                        out[ny * w + nx] = 0.5;
                    }
                }
            }
        }
        LandmarkImage {
            height: h,
            width: w,
            data: out,
        }
    }

    /// Pixels as a `[h·w, 1]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height * self.width, 1], self.data.clone()).expect("consistent shape")
    }
}

/// Four space-to-depth stages with a learned channel map each, averaged
/// over the remaining grid into one `[1, channels]` condition row.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEncoder {
    height: usize,
    width: usize,
    widths: Vec<usize>,
    params: Vec<Tensor>,
}

pub const ENCODER_STAGES: usize = 4;

impl ConditionEncoder {
    /// `hidden` holds the widths of the first three stages; the last stage
    /// emits `channels`.
    pub fn new<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        hidden: [usize; ENCODER_STAGES - 1],
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let widths: Vec<usize> = hidden.iter().copied().chain([channels]).collect();
        let params = Self::shapes(&widths)
            .into_iter()
            .map(|(_, s)| {
                if s.len() == 1 {
                    Tensor::zeros(&s)
                } else {
                    Tensor::randn(&s, 1.0 / (s[0] as f64).sqrt(), rng)
                }
            })
            .collect();
        Self::from_params(height, width, widths, params)
    }

    pub fn from_params(height: usize, width: usize, widths: Vec<usize>, params: Vec<Tensor>) -> Result<Self> {
        let f = 1 << ENCODER_STAGES;
        if height == 0 || width == 0 || height % f != 0 || width % f != 0 {
            return Err(Error::invalid(format!("landmark grid {height}x{width} not divisible by {f}")));
        }
        if widths.len() != ENCODER_STAGES || widths.contains(&0) {
            return Err(Error::invalid("condition encoder needs four positive widths"));
        }
        let shapes = Self::shapes(&widths);
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|((_, s), p)| s.as_slice() != p.shape()) {
            return Err(Error::invalid("condition encoder parameters do not match widths"));
        }
        Ok(ConditionEncoder {
            height,
            width,
            widths,
            params,
        })
    }

    fn shapes(widths: &[usize]) -> Vec<(String, Vec<usize>)> {
        let mut cin = 1;
        let mut v = Vec::new();
        for (s, &w) in widths.iter().enumerate() {
            v.push((format!("enc{s}.w"), vec![4 * cin, w]));
            v.push((format!("enc{s}.b"), vec![w]));
            cin = w;
        }
        v
    }

    pub fn channels(&self) -> usize {
        *self.widths.last().expect("four stages")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params.iter().map(|p| g.input(p.clone(), trainable)).collect()
    }

    pub fn condition_var(&self, g: &mut Graph, vars: &[Var], landmark: &LandmarkImage) -> Result<Var> {
        if landmark.shape() != (self.height, self.width) {
            return Err(Error::Shape {
                op: "condition encoder",
                lhs: vec![landmark.height, landmark.width],
                rhs: vec![self.height, self.width],
            });
        }
        let (mut h, mut w) = (self.height, self.width);
        let mut z = g.constant(landmark.to_tensor())?;
        for s in 0..ENCODER_STAGES {
            z = g.space_to_depth(z, h, w)?;
            h /= 2;
            w /= 2;
            z = g.matmul(z, vars[2 * s])?;
            z = g.add_row(z, vars[2 * s + 1])?;
            if s + 1 < ENCODER_STAGES {
                z = g.silu(z)?;
            }
        }
        let pool = g.constant(Tensor::full(&[1, h * w], 1.0 / (h * w) as f64))?;
        g.matmul(pool, z)
    }

    pub fn condition(&self, landmark: &LandmarkImage) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let c = self.condition_var(&mut g, &vars, landmark)?;
        Ok(g.value(c).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Standard deviation of the initial `A` factors.
    pub init_std: f64,
    pub encoder_widths: [usize; ENCODER_STAGES - 1],
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            init_std: 0.1,
            encoder_widths: [8, 16, 32],
        }
    }
}

/// Rank-`r` factors for the token-mixing matrix of every encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    rank: usize,
    alpha: f64,
    a: Vec<Tensor>,
    b: Vec<Tensor>,
}

impl LoraAdapter {
    /// Fresh adapter: `B = 0`, `A` Gaussian.
    pub fn new<R: Rng + ?Sized>(model: &GeneratorModel, cfg: &LoraConfig, rng: &mut R) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        if !(cfg.alpha.is_finite() && cfg.init_std.is_finite()) {
            return Err(Error::invalid("non-finite LoRA config"));
        }
        let r = model.config().tokens;
        let blocks = model.config().blocks;
        Ok(LoraAdapter {
            rank: cfg.rank,
            alpha: cfg.alpha,
            a: (0..blocks).map(|_| Tensor::randn(&[cfg.rank, r], cfg.init_std, rng)).collect(),
            b: (0..blocks).map(|_| Tensor::zeros(&[r, cfg.rank])).collect(),
        })
    }

    pub fn from_factors(rank: usize, alpha: f64, a: Vec<Tensor>, b: Vec<Tensor>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        if a.len() != b.len() {
            return Err(Error::invalid("unequal numbers of A and B factors"));
        }
        for (x, y) in a.iter().zip(&b) {
            let r = y.shape()[0];
            if x.shape() != [rank, r] || y.shape() != [r, rank] {
                return Err(Error::Shape {
                    op: "LoRA factors",
                    lhs: x.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                });
            }
        }
        Ok(LoraAdapter { rank, alpha, a, b })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `α / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn factors(&self) -> (&[Tensor], &[Tensor]) {
        (&self.a, &self.b)
    }

    fn check(&self, model: &GeneratorModel) -> Result<()> {
        let r = model.config().tokens;
        if self.a.len() != model.config().blocks || self.a.first().is_some_and(|a| a.shape()[1] != r) {
            return Err(Error::invalid("adapter does not match the model's encoder"));
        }
        Ok(())
    }

    fn delta(&self, block: usize) -> Vec<f64> {
        let (rk, r) = (self.rank, self.a[block].shape()[1]);
        let (a, b) = (self.a[block].data(), self.b[block].data());
        let mut out = vec![0.0; r * r];
        for i in 0..r {
            for j in 0..r {
                out[i * r + j] = self.scale() * (0..rk).map(|k| b[i * rk + k] * a[k * r + j]).sum::<f64>();
            }
        }
        out
    }

    /// Copy of `model` with `W + (α/r)·B·A` folded into each mixing matrix.
    pub fn merge(&self, model: &GeneratorModel) -> Result<GeneratorModel> {
        self.fold(model, 1.0)
    }

    /// Inverse of [`merge`](Self::merge).
    pub fn unmerge(&self, merged: &GeneratorModel) -> Result<GeneratorModel> {
        self.fold(merged, -1.0)
    }

    fn fold(&self, model: &GeneratorModel, sign: f64) -> Result<GeneratorModel> {
        self.check(model)?;
        let mut out = model.clone();
        for b in 0..self.a.len() {
            let idx = out.mix_index(b);
            let delta = self.delta(b);
            for (w, d) in out.params_mut()[idx].data_mut().iter_mut().zip(delta) {
                *w += sign * d;
            }
        }
        Ok(out)
    }
}

struct Bound {
    model: Vec<Var>,
    a: Vec<Var>,
    b: Vec<Var>,
    encoder: Vec<Var>,
}

impl Bound {
    fn new(
        g: &mut Graph,
        model: &GeneratorModel,
        adapter: &LoraAdapter,
        encoder: &ConditionEncoder,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Bound {
            model: model.bind(g, false)?,
            a: adapter.a.iter().map(|t| g.input(t.clone(), trainable)).collect::<Result<_>>()?,
            b: adapter.b.iter().map(|t| g.input(t.clone(), trainable)).collect::<Result<_>>()?,
            encoder: encoder.bind(g, trainable)?,
        })
    }

    fn adapters(&self, scale: f64) -> Vec<MixAdapter> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(&a, &b)| MixAdapter { a, b, scale })
            .collect()
    }

    fn trainable(&self) -> impl Iterator<Item = Var> + '_ {
        self.a.iter().chain(&self.b).chain(&self.encoder).copied()
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        model: &GeneratorModel,
        adapter: &LoraAdapter,
        encoder: &ConditionEncoder,
        f_im: &Embedding,
        landmark: &LandmarkImage,
        mask: &RowMask,
    ) -> Result<Var> {
        let dim = model.config().dim;
        if f_im.dim() != dim {
            return Err(Error::Shape {
                op: "lora forward",
                lhs: vec![f_im.dim()],
                rhs: vec![dim],
            });
        }
        let f = g.constant(f_im.to_tensor().reshaped(&[1, dim])?)?;
        let cond = encoder.condition_var(g, &self.encoder, landmark)?;
        let ads = self.adapters(adapter.scale());
        model.forward_graph(g, &self.model, f, Condition::Projected(cond), mask, Some(&ads))
    }
}

fn check_pair(model: &GeneratorModel, adapter: &LoraAdapter, encoder: &ConditionEncoder) -> Result<()> {
    adapter.check(model)?;
    if encoder.channels() != model.config().channels {
        return Err(Error::Shape {
            op: "condition width",
            lhs: vec![encoder.channels()],
            rhs: vec![model.config().channels],
        });
    }
    Ok(())
}

/// Generator forward with adapted mixing matrices and the encoded landmark
/// image as the fill-in condition.
pub fn lora_forward_masked(
    model: &GeneratorModel,
    adapter: &LoraAdapter,
    encoder: &ConditionEncoder,
    f_im: &Embedding,
    landmark: &LandmarkImage,
    mask: &RowMask,
) -> Result<Tensor> {
    check_pair(model, adapter, encoder)?;
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, model, adapter, encoder, false)?;
    let out = bound.forward(&mut g, model, adapter, encoder, f_im, landmark, mask)?;
    Ok(g.value(out).clone())
}

pub fn lora_forward<R: Rng + ?Sized>(
    model: &GeneratorModel,
    adapter: &LoraAdapter,
    encoder: &ConditionEncoder,
    f_im: &Embedding,
    landmark: &LandmarkImage,
    mask_ratio: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let mask = RowMask::sample(mask_ratio, model.config().tokens, rng)?;
    lora_forward_masked(model, adapter, encoder, f_im, landmark, &mask)
}

/// One LoRA training example.
#[derive(Clone, Debug)]
pub struct PoseTriple {
    pub f_im: Embedding,
    pub landmark: LandmarkImage,
    pub im_gt: Tensor,
}

/// Toy images at random poses, each paired with its own feature and the
/// landmark layout of its pose.
pub fn pose_dataset(world: &ToyWorld, oracle: &OracleEmbedder, cfg: &ToyDatasetConfig) -> Result<Vec<PoseTriple>> {
    let shape = world.image_shape();
    toy_dataset(world, oracle, cfg)?
        .into_iter()
        .map(|s| {
            Ok(PoseTriple {
                landmark: LandmarkImage::render(&LandmarkLayout::for_pose(s.pose), shape.height, shape.width, false)?,
                f_im: s.feature,
                im_gt: s.image,
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn lora_batch(
    model: &GeneratorModel,
    adapter: &LoraAdapter,
    encoder: &ConditionEncoder,
    oracle: &OracleEmbedder,
    bank: &PerceptualBank,
    data: &[PoseTriple],
    cfg: &TrainConfig,
    draws: &[Draw],
) -> Result<BatchOutput> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, model, adapter, encoder, true)?;
    let mut terms = Vec::with_capacity(draws.len());
    let mut total = None;
    for d in draws {
        let ex = &data[d.index];
        let recon = bound.forward(&mut g, model, adapter, encoder, &ex.f_im, &ex.landmark, &d.mask)?;
        let t = loss_graph(&mut g, recon, oracle, bank, &ex.im_gt, &ex.f_im, &cfg.weights)?;
        terms.push(t.values(&g));
        total = Some(match total {
            None => t.total,
            Some(acc) => g.add(acc, t.total)?,
        });
    }
    let total = total.ok_or(Error::Empty("batch"))?;
    let mut gr = g.backward(total)?;
    let grads = bound
        .trainable()
        .map(|v| gr.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect();
    Ok(BatchOutput { terms, grads })
}

/// Gradient descent on the adapter factors and encoder with the generator
/// frozen; same objective as generator training, masks drawn from `mask`.
#[allow(clippy::too_many_arguments)]
pub fn train_pose_lora(
    model: &GeneratorModel,
    adapter: &mut LoraAdapter,
    encoder: &mut ConditionEncoder,
    oracle: &OracleEmbedder,
    bank: &PerceptualBank,
    data: &[PoseTriple],
    mask: &MaskConfig,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    mask.validate()?;
    check_pair(model, adapter, encoder)?;
    if data.is_empty() {
        return Err(Error::Empty("pose dataset"));
    }
    let mut r = rng::stream(cfg.seed, "train-lora", 0);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let draws = draw_batch(model, mask, data.len(), cfg.batch, &mut r)?;
        let out = {
            let (ad, en): (&LoraAdapter, &ConditionEncoder) = (adapter, encoder);
            fan_out(&draws, cfg.workers, |chunk| {
                lora_batch(model, ad, en, oracle, bank, data, cfg, chunk)
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
        let params = adapter
            .a
            .iter_mut()
            .chain(adapter.b.iter_mut())
            .chain(encoder.params.iter_mut());
        for (p, gr) in params.zip(&out.grads) {
            p.axpy(-scale, gr);
        }
        let finite = adapter.a.iter().chain(&adapter.b).chain(&encoder.params).all(Tensor::is_finite);
        if !finite {
            return Err(Error::Divergence { step });
        }
    }
    Ok(trace)
}

/// Render every candidate feature against every layout with a fixed mask.
/// Output is candidate-major.
pub fn render_poses(
    model: &GeneratorModel,
    adapter: &LoraAdapter,
    encoder: &ConditionEncoder,
    candidates: &[Embedding],
    layouts: &[LandmarkLayout],
    mask_ratio: f64,
) -> Result<Vec<Tensor>> {
    let (h, w) = encoder.grid();
    let marks = layouts
        .iter()
        .map(|l| LandmarkImage::render(l, h, w, false))
        .collect::<Result<Vec<_>>>()?;
    let mask = RowMask::leading(mask_ratio, model.config().tokens)?;
    let mut out = Vec::with_capacity(candidates.len() * marks.len());
    for c in candidates {
        for m in &marks {
            out.push(lora_forward_masked(model, adapter, encoder, c, m, &mask)?);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoraMeta {
    rank: usize,
    alpha: f64,
    landmark: ImageShape,
    encoder_widths: Vec<usize>,
}

/// Checkpoint section holding an adapter and its condition encoder.
pub fn lora_section(adapter: &LoraAdapter, encoder: &ConditionEncoder) -> Result<Section> {
    let meta = serde_json::to_string(&LoraMeta {
        rank: adapter.rank,
        alpha: adapter.alpha,
        landmark: ImageShape::new(encoder.height, encoder.width, 1),
        encoder_widths: encoder.widths.clone(),
    })
    .map_err(|e| Error::invalid(e.to_string()))?;
    let mut tensors = Vec::new();
    for (i, a) in adapter.a.iter().enumerate() {
        tensors.push((format!("block{i}.mix.lora_a"), a.clone()));
    }
    for (i, b) in adapter.b.iter().enumerate() {
        tensors.push((format!("block{i}.mix.lora_b"), b.clone()));
    }
    for ((name, _), p) in ConditionEncoder::shapes(&encoder.widths).into_iter().zip(&encoder.params) {
        tensors.push((name, p.clone()));
    }
    Ok(Section { meta, tensors })
}

pub fn lora_from_section(section: &Section, model: &GeneratorModel) -> Result<(LoraAdapter, ConditionEncoder)> {
    let meta: LoraMeta =
        serde_json::from_str(&section.meta).map_err(|e| Error::invalid(format!("LoRA metadata: {e}")))?;
    let blocks = model.config().blocks;
    let n_enc = 2 * meta.encoder_widths.len();
    if section.tensors.len() != 2 * blocks + n_enc {
        return Err(Error::invalid("LoRA section has the wrong number of tensors"));
    }
    let t: Vec<Tensor> = section.tensors.iter().map(|(_, t)| t.clone()).collect();
    let adapter = LoraAdapter::from_factors(meta.rank, meta.alpha, t[..blocks].to_vec(), t[blocks..2 * blocks].to_vec())?;
    adapter.check(model)?;
    let encoder = ConditionEncoder::from_params(
        meta.landmark.height,
        meta.landmark.width,
        meta.encoder_widths,
        t[2 * blocks..].to_vec(),
    )?;
    check_pair(model, &adapter, &encoder)?;
    Ok((adapter, encoder))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    fn setup() -> (GeneratorModel, LoraAdapter, ConditionEncoder) {
        let m = GeneratorModel::new(GeneratorConfig::toy(), MaskConfig::default(), &mut rng::stream(1, "m", 0)).unwrap();
        let cfg = LoraConfig::default();
        let a = LoraAdapter::new(&m, &cfg, &mut rng::stream(1, "a", 0)).unwrap();
        let e = ConditionEncoder::new(16, 16, cfg.encoder_widths, 64, &mut rng::stream(1, "e", 0)).unwrap();
        (m, a, e)
    }

    fn feature() -> Embedding {
        Embedding::new(Tensor::randn(&[64], 2.5, &mut rng::stream(3, "f", 0)).into_data()).unwrap()
    }

    fn trained_b(a: &mut LoraAdapter) {
        let mut r = rng::stream(4, "b", 0);
        for b in &mut a.b {
            *b = Tensor::randn(b.shape(), 0.3, &mut r);
        }
    }

    #[test]
    fn templates_have_five_points() {
        for l in [LandmarkLayout::frontal(), LandmarkLayout::profile_left(), LandmarkLayout::profile_right()] {
            let img = LandmarkImage::render(&l, 16, 16, false).unwrap();
            assert_eq!(img.lit_regions(), 5);
            assert_eq!(img.data().iter().filter(|&&v| v == 1.0).count(), 5);
            let blurred = LandmarkImage::render(&l, 16, 16, true).unwrap();
            assert!(blurred.data().iter().any(|&v| v == 0.5));
        }
    }

    #[test]
    fn touching_points_rejected() {
        let mut l = LandmarkLayout::frontal();
        l.points[1] = l.points[0];
        assert!(LandmarkImage::render(&l, 16, 16, false).is_err());
        assert!(LandmarkImage::from_pixels(2, 2, vec![1.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn zero_rank_rejected() {
        let (m, _, _) = setup();
        let cfg = LoraConfig {
            rank: 0,
            ..LoraConfig::default()
        };
        assert!(LoraAdapter::new(&m, &cfg, &mut rng::stream(0, "x", 0)).is_err());
    }

    #[test]
    fn fresh_adapter_is_identity_when_unmasked() {
        let (m, a, e) = setup();
        let lm = LandmarkImage::render(&LandmarkLayout::profile_left(), 16, 16, false).unwrap();
        let none = RowMask::none(8);
        let f = feature();
        let base = m.forward_masked(&f, &f, &none).unwrap();
        let lora = lora_forward_masked(&m, &a, &e, &f, &lm, &none).unwrap();
        assert_eq!(base.data(), lora.data());
    }

    #[test]
    fn merged_matches_unmerged() {
        let (m, mut a, e) = setup();
        trained_b(&mut a);
        let lm = LandmarkImage::render(&LandmarkLayout::profile_right(), 16, 16, false).unwrap();
        let f = feature();
        let mask = RowMask::from_dropped(8, vec![0, 3, 5, 6]).unwrap();
        let unmerged = lora_forward_masked(&m, &a, &e, &f, &lm, &mask).unwrap();

        let merged = a.merge(&m).unwrap();
        let mut g = Graph::new();
        let vars = merged.bind(&mut g, false).unwrap();
        let ev = e.bind(&mut g, false).unwrap();
        let cond = e.condition_var(&mut g, &ev, &lm).unwrap();
        let fv = g.constant(f.to_tensor().reshaped(&[1, 64]).unwrap()).unwrap();
        let out = merged
            .forward_graph(&mut g, &vars, fv, Condition::Projected(cond), &mask, None)
            .unwrap();
        assert!(g.value(out).max_abs_diff(&unmerged) < 1e-9);

        let back = a.unmerge(&merged).unwrap();
        for (x, y) in back.params().iter().zip(m.params()) {
            assert!(x.max_abs_diff(y) < 1e-12);
        }
    }

    #[test]
    fn section_round_trip() {
        let (m, mut a, e) = setup();
        trained_b(&mut a);
        let s = lora_section(&a, &e).unwrap();
        let (a2, e2) = lora_from_section(&s, &m).unwrap();
        assert_eq!(a2, a);
        assert_eq!(e2, e);
    }

    #[test]
    fn encoder_output_is_one_row() {
        let (_, _, e) = setup();
        let lm = LandmarkImage::render(&LandmarkLayout::frontal(), 16, 16, true).unwrap();
        let c = e.condition(&lm).unwrap();
        assert_eq!(c.shape(), &[1, 64]);
        assert!(c.is_finite());
    }
}
