use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::evaluate;
use super::{write_json, StageName};
use crate::attrop::{attrop, AttrOpConfig, Inference, ToyEvaluators};
use crate::dataset::{
    archive_name, assemble, dbscan_clean, embed_manifest, gate_identity, gate_perturbation, leakage_check, percentile,
    to_f32_precision, Archives, DatasetManifest, ImageArchive, ManifestRow, Stage,
};
use crate::embedding::{cosine, labels_path, Embedding, OracleEmbedder, VectorStore};
use crate::error::{Error, Result};
use crate::generator::toy::{pose_statistic, toy_dataset, ToyWorld};
use crate::generator::{
    load_model, save_model, train, write_trace_csv, GeneratorModel, PerceptualBank, PerceptualConfig, TrainingPair,
    LORA_TAG,
};
use crate::lora::{
    lora_from_section, lora_section, pose_dataset, render_poses, train_pose_lora, ConditionEncoder, LandmarkLayout,
    LoraAdapter,
};
use crate::rng;
use crate::sampler::{perturb_store, sample_identities};
use crate::tensor::Tensor;

/// Artifact locations, relative to the run directory.
pub mod paths {
    pub const CANDIDATES: &str = "ids/candidates.vec2";
    pub const REFERENCES: &str = "ids/references.vec2";
    pub const PERTURB_RANDOM: &str = "perturb/random.vec2";
    pub const PERTURB_POSE: &str = "perturb/pose.vec2";
    pub const PERTURB_PROBE: &str = "perturb/probe.vec2";
    pub const GENERATOR: &str = "model/generator.v2fp";
    pub const GENERATOR_TRACE: &str = "model/generator-trace.csv";
    pub const POSE_LORA: &str = "model/pose-lora.v2fp";
    pub const POSE_LORA_TRACE: &str = "model/pose-lora-trace.csv";
    pub const IDENTITIES: &str = "identity/identities.vec2";
    pub const IDENTITY_FEATURES: &str = "identity/features.vec2";
    pub const IDENTITY_IMG: &str = "identity/identity.img";
    pub const IDENTITY_GATE: &str = "identity/gate.tsv";
    pub const IDENTITY_SUMMARY: &str = "identity/summary.json";
    pub const DATASET_DIR: &str = "dataset";
    pub const RANDOM_IMG: &str = "dataset/random.img";
    pub const ATTROP_IMG: &str = "dataset/attrop-pose.img";
    pub const LORA_IMG: &str = "dataset/lora-pose.img";
    pub const CANARY_IMG: &str = "dataset/canary.img";
    pub const POOL_RANDOM: &str = "dataset/pool-random.tsv";
    pub const POOL_ATTROP: &str = "dataset/pool-attrop-pose.tsv";
    pub const POOL_LORA: &str = "dataset/pool-lora-pose.tsv";
    pub const GATES: &str = "dataset/gates.json";
    pub const ASSEMBLED: &str = "dataset/assembled.tsv";
    pub const CLEANED: &str = "dataset/cleaned.tsv";
    pub const DBSCAN_DROPPED: &str = "dataset/dbscan-dropped.tsv";
    pub const MANIFEST: &str = "dataset/manifest.tsv";
    pub const LEAK_DROPPED: &str = "dataset/leak-dropped.tsv";
    pub const EMBEDDINGS: &str = "dataset/embeddings.vec2";
    pub const CLEAN: &str = "reports/clean.json";
    pub const LEAK: &str = "reports/leak.json";
    pub const METRICS: &str = "reports/metrics.json";
    pub const ATTRIBUTES: &str = "reports/attributes.csv";
    pub const BOXPLOT: &str = "reports/boxplot.csv";
    pub const SCATTER: &str = "reports/scatter.csv";
    pub const VERIFY: &str = "reports/verify.json";
    pub const VERIFY_SCORES: &str = "reports/verify-scores.tsv";
    pub const REPORT: &str = "reports/report.json";
    pub const ABLATION: &str = "reports/ablation.json";
}

use paths::*;

/// Image ids encode their base: `stage_offset + slot`.
pub const POSE_IMAGE_OFFSET: u64 = 10_000;
pub const LORA_IMAGE_OFFSET: u64 = 20_000;
pub const CANARY_IMAGE_ID: u64 = 90_000;

pub(super) struct Ctx<'a> {
    pub cfg: &'a PipelineConfig,
    pub root: &'a Path,
    outputs: Vec<String>,
}

impl<'a> Ctx<'a> {
    pub fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn out(&mut self, rel: &str) {
        self.outputs.push(rel.to_string());
    }

    fn out_store(&mut self, rel: &str, store: &VectorStore) -> Result<()> {
        store.write(&self.p(rel))?;
        self.out(rel);
        if store.labels().is_some() {
            let lp = labels_path(Path::new(rel));
            self.out(&lp.to_string_lossy());
        }
        Ok(())
    }

    fn out_manifest(&mut self, rel: &str, m: &DatasetManifest) -> Result<()> {
        m.write(&self.p(rel))?;
        self.out(rel);
        Ok(())
    }

    fn out_json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<()> {
        write_json(&self.p(rel), v)?;
        self.out(rel);
        Ok(())
    }

    fn out_text(&mut self, rel: &str, text: &str) -> Result<()> {
        crate::io::write_atomic(&self.p(rel), text.as_bytes())?;
        self.out(rel);
        Ok(())
    }

    pub fn oracle(&self) -> Result<OracleEmbedder> {
        OracleEmbedder::new(self.cfg.oracle_config())
    }

    pub fn generator(&self) -> Result<GeneratorModel> {
        let (m, _) = load_model(&self.p(GENERATOR))?;
        if m.config() != &self.cfg.generator_config() {
            return Err(Error::Config("generator checkpoint does not match the configured architecture".into()));
        }
        Ok(m)
    }

    pub fn archives(&self) -> Archives {
        Archives::new(self.p(DATASET_DIR))
    }

    fn target_norm(&self) -> f64 {
        0.5 * (self.cfg.perturbation.norm_lo + self.cfg.perturbation.norm_hi)
    }
}

pub(super) fn run(stage: StageName, cfg: &PipelineConfig, root: &Path) -> Result<Vec<String>> {
    let mut ctx = Ctx { cfg, root, outputs: Vec::new() };
    match stage {
        StageName::SampleIds => sample_ids(&mut ctx)?,
        StageName::Perturb => perturb(&mut ctx)?,
        StageName::TrainGen => train_gen(&mut ctx)?,
        StageName::Attrop => attrop_stage(&mut ctx)?,
        StageName::TrainPoseLora => train_lora(&mut ctx)?,
        StageName::GenPose => gen_pose(&mut ctx)?,
        StageName::Assemble => assemble_stage(&mut ctx)?,
        StageName::Clean => clean(&mut ctx)?,
        StageName::LeakCheck => leak_check(&mut ctx)?,
        StageName::Metrics => metrics(&mut ctx)?,
        StageName::Verify => verify(&mut ctx)?,
        StageName::Report => report(&mut ctx)?,
    }
    Ok(ctx.outputs)
}

fn sample_ids(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let all = sample_identities(&cfg.sampler_config())?;
    let n = cfg.identities.candidates;
    let (mut cand, mut refs) = (VectorStore::new(all.dim()), VectorStore::new(all.dim()));
    for i in 0..all.len() {
        if i < n {
            cand.push_labelled(all.row(i), i.to_string())?;
        } else {
            refs.push_labelled(all.row(i), format!("ref{}", i - n))?;
        }
    }
    ctx.out_store(CANDIDATES, &cand)?;
    ctx.out_store(REFERENCES, &refs)
}

fn perturb(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let cand = VectorStore::read(&ctx.p(CANDIDATES))?;
    for (rel, spec, label) in [
        (PERTURB_RANDOM, cfg.random_spec(), "perturb-random"),
        (PERTURB_POSE, cfg.pose_spec(), "perturb-pose"),
        (PERTURB_PROBE, cfg.probe_spec(), "perturb-probe"),
    ] {
        let s = perturb_store(&cand, &spec, cfg.seed_for(label))?;
        ctx.out_store(rel, &s)?;
    }
    Ok(())
}

pub(super) fn perceptual_bank(cfg: &PipelineConfig) -> Result<PerceptualBank> {
    PerceptualBank::new(
        cfg.image,
        &PerceptualConfig { seed: cfg.seed_for("perceptual"), ..PerceptualConfig::default() },
    )
}

fn train_gen(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let oracle = ctx.oracle()?;
    let world = ToyWorld::new(cfg.world_config(), &oracle)?;
    let data = toy_dataset(&world, &oracle, &cfg.generator.data.to_dataset_config(cfg.seed_for("toy-data")))?;
    let pairs: Vec<TrainingPair> = data
        .into_iter()
        .map(|s| TrainingPair { f_im: s.feature, im_gt: s.image })
        .collect();
    let mut model = GeneratorModel::new(
        cfg.generator_config(),
        cfg.generator.mask,
        &mut rng::stream(cfg.seed, "generator-init", 0),
    )?;
    let bank = perceptual_bank(cfg)?;
    let tc = cfg.generator.train.to_train_config(cfg.seed_for("train-gen"), cfg.workers);
    let trace = train(&mut model, &oracle, &bank, &pairs, &tc)?;
    save_model(&ctx.p(GENERATOR), &model, &[])?;
    ctx.out(GENERATOR);
    write_trace_csv(&ctx.p(GENERATOR_TRACE), &trace)?;
    ctx.out(GENERATOR_TRACE);
    Ok(())
}

/// Search from `v_init` toward the quality target and `pose` (or, when
/// `None`, the starting image's own pose), returning the final image at
/// storage precision and the starting image's quality.
pub(super) fn search(
    inf: &Inference,
    ev: &ToyEvaluators,
    v_id: &Embedding,
    v_init: &Embedding,
    quality: f64,
    pose: Option<f64>,
    iterations: usize,
    step: f64,
) -> Result<(Tensor, f64)> {
    let img0 = inf.generate(v_init)?;
    let q0 = ev.oracle.embed(&img0)?.norm();
    let pose = match pose {
        Some(p) => p,
        None => pose_statistic(&img0, ev.image)?.abs(),
    };
    let mut c = AttrOpConfig::new(quality, pose, iterations);
    c.step = step;
    let out = attrop(v_id, v_init, inf, ev, &c)?;
    Ok((to_f32_precision(&inf.generate(&out.vector)?), q0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PassCount {
    pub evaluated: usize,
    pub accepted: usize,
}

impl PassCount {
    pub fn rate(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.accepted as f64 / self.evaluated as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateCounts {
    pub identity: PassCount,
    pub random: PassCount,
    pub attrop_pose: PassCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySummary {
    pub candidates_evaluated: usize,
    pub accepted: usize,
    /// Magnitude percentiles of identity images before the search.
    pub raw_quality_p40: f64,
    pub raw_quality_p60: f64,
}

fn group_by_label(store: &VectorStore) -> Result<BTreeMap<String, Vec<usize>>> {
    let labels = store.labels().ok_or_else(|| Error::invalid("perturbation store has no labels"))?;
    let mut m: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        m.entry(l.clone()).or_default().push(i);
    }
    Ok(m)
}

fn attrop_stage(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let a = &cfg.attrop;
    let oracle = ctx.oracle()?;
    let model = ctx.generator()?;
    let inf = Inference::new(&model, cfg.generator.inference_mask)?;
    let ev = ToyEvaluators { oracle: &oracle, image: cfg.image };
    let cand = VectorStore::read(&ctx.p(CANDIDATES))?;

    let mut ids = VectorStore::new(cand.dim());
    let mut feats = VectorStore::new(cand.dim());
    let mut id_arch = ImageArchive::new(cfg.image);
    let mut log = String::from("candidate\tsim\tquality\taccept\n");
    let mut raw = Vec::new();
    let mut accepted: Vec<(u64, Embedding, Embedding)> = Vec::new();
    let mut counts = GateCounts {
        identity: PassCount::default(),
        random: PassCount::default(),
        attrop_pose: PassCount::default(),
    };
    for i in 0..cand.len() {
        if accepted.len() == cfg.identities.count {
            break;
        }
        let v_id = cand.embedding(i);
        let v = v_id.normalized()?.scaled(ctx.target_norm());
        let (img, q0) = search(&inf, &ev, &v, &v, a.quality, None, a.random_iterations, a.step)?;
        raw.push(q0);
        let d = gate_identity(&img, &v_id, &oracle, &cfg.gates.identity)?;
        counts.identity.evaluated += 1;
        log.push_str(&format!("{i}\t{}\t{}\t{}\n", d.sim, d.quality, d.accept as u8));
        if d.accept {
            counts.identity.accepted += 1;
            let f = oracle.embed(&img)?.to_f32_precision();
            ids.push_labelled(v_id.values(), i.to_string())?;
            feats.push_labelled(f.values(), i.to_string())?;
            id_arch.push(&img)?;
            accepted.push((i as u64, v_id, f));
        }
    }
    if accepted.len() < cfg.identities.count {
        return Err(Error::invalid(format!(
            "only {} of {} identity candidates passed the identity gate; {} needed",
            accepted.len(),
            cand.len(),
            cfg.identities.count
        )));
    }
    ctx.out_store(IDENTITIES, &ids)?;
    ctx.out_store(IDENTITY_FEATURES, &feats)?;
    id_arch.write(&ctx.p(IDENTITY_IMG))?;
    ctx.out(IDENTITY_IMG);
    ctx.out_text(IDENTITY_GATE, &log)?;
    ctx.out_json(
        IDENTITY_SUMMARY,
        &IdentitySummary {
            candidates_evaluated: counts.identity.evaluated,
            accepted: accepted.len(),
            raw_quality_p40: percentile(&raw, 0.4)?,
            raw_quality_p60: percentile(&raw, 0.6)?,
        },
    )?;

    let yaw: Vec<f64> = a.yaw_degrees.iter().map(|d| d * a.units_per_degree).collect();
    for (stage, rel_vec, rel_pool, rel_img) in [
        (Stage::Random, PERTURB_RANDOM, POOL_RANDOM, RANDOM_IMG),
        (Stage::AttropPose, PERTURB_POSE, POOL_ATTROP, ATTROP_IMG),
    ] {
        let store = VectorStore::read(&ctx.p(rel_vec))?;
        let groups = group_by_label(&store)?;
        let mut arch = ImageArchive::new(cfg.image);
        let mut rows = Vec::new();
        let mut count = PassCount::default();
        for (id, v_id, f_id) in &accepted {
            let slots = groups.get(&id.to_string()).map(Vec::as_slice).unwrap_or_default();
            for (j, &r) in slots.iter().enumerate() {
                let v_p = store.embedding(r);
                let (img, _) = match stage {
                    Stage::Random => search(&inf, &ev, v_id, &v_p, a.quality, None, a.random_iterations, a.step)?,
                    _ => search(&inf, &ev, v_id, &v_p, a.quality, Some(yaw[j % yaw.len()]), a.pose_iterations, a.step)?,
                };
                let d = gate_perturbation(&img, f_id, &oracle, &cfg.gates.perturbation)?;
                count.evaluated += 1;
                if d.accept {
                    count.accepted += 1;
                    let offset = arch.push(&img)?;
                    let base = if stage == Stage::Random { 0 } else { POSE_IMAGE_OFFSET };
                    rows.push(ManifestRow {
                        identity_id: *id,
                        image_id: base + j as u64,
                        stage,
                        sim_to_identity: d.sim,
                        quality: d.quality,
                        archive: archive_name(stage),
                        offset,
                    });
                }
            }
        }
        if stage == Stage::Random {
            counts.random = count;
        } else {
            counts.attrop_pose = count;
        }
        arch.write(&ctx.p(rel_img))?;
        ctx.out(rel_img);
        ctx.out_manifest(rel_pool, &DatasetManifest::new(rows)?)?;
    }
    ctx.out_json(GATES, &counts)
}

fn train_lora(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let oracle = ctx.oracle()?;
    let model = ctx.generator()?;
    let world = ToyWorld::new(cfg.world_config(), &oracle)?;
    let data = pose_dataset(&world, &oracle, &cfg.lora.data.to_dataset_config(cfg.seed_for("pose-data")))?;
    let bank = perceptual_bank(cfg)?;
    let lc = cfg.lora.lora_config();
    let mut adapter = LoraAdapter::new(&model, &lc, &mut rng::stream(cfg.seed, "lora-init", 0))?;
    let mut encoder = ConditionEncoder::new(
        cfg.image.height,
        cfg.image.width,
        lc.encoder_widths,
        model.config().channels,
        &mut rng::stream(cfg.seed, "encoder-init", 0),
    )?;
    let tc = cfg.lora.train.to_train_config(cfg.seed_for("train-pose-lora"), cfg.workers);
    let trace = train_pose_lora(&model, &mut adapter, &mut encoder, &oracle, &bank, &data, &cfg.lora.train_mask, &tc)?;
    save_model(&ctx.p(POSE_LORA), &model, &[(*LORA_TAG, lora_section(&adapter, &encoder)?)])?;
    ctx.out(POSE_LORA);
    write_trace_csv(&ctx.p(POSE_LORA_TRACE), &trace)?;
    ctx.out(POSE_LORA_TRACE);
    Ok(())
}

fn identity_refs(ctx: &Ctx) -> Result<BTreeMap<u64, Embedding>> {
    crate::dataset::references_by_label(&VectorStore::read(&ctx.p(IDENTITY_FEATURES))?)
}

fn gen_pose(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let oracle = ctx.oracle()?;
    let (model, extras) = load_model(&ctx.p(POSE_LORA))?;
    let section = extras
        .iter()
        .find(|(tag, _)| tag == LORA_TAG)
        .map(|(_, s)| s)
        .ok_or_else(|| Error::invalid("pose checkpoint has no adapter section"))?;
    let (adapter, encoder) = lora_from_section(section, &model)?;
    let pool = DatasetManifest::read(&ctx.p(POOL_RANDOM))?;
    let refs = identity_refs(ctx)?;
    let mut archives = ctx.archives();
    let layouts = LandmarkLayout::profiles();
    let mut arch = ImageArchive::new(cfg.image);
    let mut rows = Vec::new();
    for (id, members) in pool.groups() {
        let f_id = refs
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("identity {id} has no identity feature")))?;
        let n = cfg.lora.candidates.min(members.len());
        let mut r = rng::stream(cfg.seed_for("gen-pose"), "identity", id);
        let mut pick = sample(&mut r, members.len(), n).into_vec();
        pick.sort_unstable();
        let cands = pick
            .iter()
            .map(|&k| oracle.embed(&archives.image(&pool.rows()[members[k]])?))
            .collect::<Result<Vec<_>>>()?;
        let images = render_poses(&model, &adapter, &encoder, &cands, &layouts, cfg.lora.mask)?;
        for (j, img) in images.iter().enumerate() {
            let img = to_f32_precision(img);
            let f = oracle.embed(&img)?;
            let offset = arch.push(&img)?;
            rows.push(ManifestRow {
                identity_id: id,
                image_id: LORA_IMAGE_OFFSET + j as u64,
                stage: Stage::LoraPose,
                sim_to_identity: cosine(f.values(), f_id.values())?,
                quality: f.norm(),
                archive: archive_name(Stage::LoraPose),
                offset,
            });
        }
    }
    arch.write(&ctx.p(LORA_IMG))?;
    ctx.out(LORA_IMG);
    ctx.out_manifest(POOL_LORA, &DatasetManifest::new(rows)?)
}

fn assemble_stage(ctx: &mut Ctx) -> Result<()> {
    let mut rows = Vec::new();
    for rel in [POOL_RANDOM, POOL_ATTROP, POOL_LORA] {
        rows.extend(DatasetManifest::read(&ctx.p(rel))?.into_rows());
    }
    let pool = DatasetManifest::new(rows)?;
    let m = assemble(&pool, &ctx.cfg.assemble, ctx.cfg.seed_for("assemble"))?;
    ctx.out_manifest(ASSEMBLED, &m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanSummary {
    pub eps: f64,
    pub min_pts: usize,
    pub input_rows: usize,
    pub kept: usize,
    pub dropped: usize,
    pub skipped_identities: Vec<u64>,
}

fn clean(ctx: &mut Ctx) -> Result<()> {
    let oracle = ctx.oracle()?;
    let m = DatasetManifest::read(&ctx.p(ASSEMBLED))?;
    let emb = embed_manifest(&m, &mut ctx.archives(), &oracle)?;
    let out = dbscan_clean(&m, &emb, &ctx.cfg.dbscan)?;
    ctx.out_manifest(CLEANED, &out.kept)?;
    ctx.out_manifest(DBSCAN_DROPPED, &out.dropped)?;
    let s = CleanSummary {
        eps: ctx.cfg.dbscan.eps,
        min_pts: ctx.cfg.dbscan.min_pts,
        input_rows: m.len(),
        kept: out.kept.len(),
        dropped: out.dropped.len(),
        skipped_identities: out.skipped,
    };
    ctx.out_json(CLEAN, &s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedRow {
    pub identity_id: u64,
    pub image_id: u64,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Canary {
    pub identity_id: u64,
    pub image_id: u64,
    /// Index of the reference identity the canary was built from.
    pub reference: usize,
    pub target_cosine: f64,
    /// Cosine of the canary's embedding to that reference.
    pub cosine: f64,
    pub dropped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakSummary {
    pub references: usize,
    pub threshold: f64,
    pub checked_rows: usize,
    pub kept: usize,
    pub dropped: Vec<DroppedRow>,
    pub canary: Option<Canary>,
}

/// Feature at cosine `c` to `reference`, along a seeded orthogonal
/// direction, scaled to `norm`.
pub fn vector_at_cosine<R: Rng + ?Sized>(reference: &Embedding, c: f64, norm: f64, rng: &mut R) -> Result<Embedding> {
    let r = reference.normalized()?;
    let mut w = Tensor::randn(&[r.dim()], 1.0, rng).into_data();
    let d: f64 = w.iter().zip(r.values()).map(|(a, b)| a * b).sum();
    for (x, y) in w.iter_mut().zip(r.values()) {
        *x -= d * y;
    }
    let w = Embedding::new(w)?.normalized()?;
    let s = (1.0 - c * c).sqrt();
    let v: Vec<f64> = r.values().iter().zip(w.values()).map(|(a, b)| c * a + s * b).collect();
    Ok(Embedding::new(v)?.scaled(norm))
}

fn leak_check(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let oracle = ctx.oracle()?;
    let m = DatasetManifest::read(&ctx.p(CLEANED))?;
    if m.is_empty() {
        return Err(Error::Empty("cleaned manifest"));
    }
    let refs = match &cfg.leak.references {
        Some(p) => VectorStore::read(&ctx.root.join(p))?,
        None => VectorStore::read(&ctx.p(REFERENCES))?,
    };
    let mut archives = ctx.archives();
    let mut rows = m.rows().to_vec();
    let mut canary = None;
    if let Some(c) = cfg.leak.canary {
        let model = ctx.generator()?;
        let inf = Inference::new(&model, cfg.generator.inference_mask)?;
        let mut r = rng::stream(cfg.seed, "canary", 0);
        let k = r.random_range(0..refs.len());
        let v = vector_at_cosine(&refs.embedding(k), c, ctx.target_norm(), &mut r)?;
        let img = to_f32_precision(&inf.generate(&v)?);
        let mut a = ImageArchive::new(cfg.image);
        a.push(&img)?;
        a.write(&ctx.p(CANARY_IMG))?;
        ctx.out(CANARY_IMG);
        archives.insert("canary.img", a);
        let f = oracle.embed(&img)?;
        let id = m.rows()[0].identity_id;
        let f_id = identity_refs(ctx)?
            .remove(&id)
            .ok_or_else(|| Error::invalid(format!("identity {id} has no identity feature")))?;
        rows.push(ManifestRow {
            identity_id: id,
            image_id: CANARY_IMAGE_ID,
            stage: Stage::Random,
            sim_to_identity: cosine(f.values(), f_id.values())?,
            quality: f.norm(),
            archive: "canary.img".into(),
            offset: 0,
        });
        canary = Some(Canary {
            identity_id: id,
            image_id: CANARY_IMAGE_ID,
            reference: k,
            target_cosine: c,
            cosine: cosine(f.values(), refs.row(k))?,
            dropped: false,
        });
    }
    let checked = DatasetManifest::new(rows)?;
    let emb = embed_manifest(&checked, &mut archives, &oracle)?;
    let out = leakage_check(&checked, &emb, &refs, cfg.leak.threshold)?;
    let dropped: Vec<DroppedRow> = out
        .dropped
        .rows()
        .iter()
        .zip(&out.dropped_similarity)
        .map(|(r, &s)| DroppedRow { identity_id: r.identity_id, image_id: r.image_id, similarity: s })
        .collect();
    if let Some(c) = canary.as_mut() {
        c.dropped = dropped.iter().any(|d| d.identity_id == c.identity_id && d.image_id == c.image_id);
        if !c.dropped {
            return Err(Error::invalid(format!(
                "leak check kept the canary image (cosine {} to reference {})",
                c.cosine, c.reference
            )));
        }
    }
    let kept_emb = embed_manifest(&out.kept, &mut archives, &oracle)?;
    ctx.out_manifest(MANIFEST, &out.kept)?;
    ctx.out_manifest(LEAK_DROPPED, &out.dropped)?;
    ctx.out_store(EMBEDDINGS, &kept_emb)?;
    let s = LeakSummary {
        references: refs.len(),
        threshold: cfg.leak.threshold,
        checked_rows: checked.len(),
        kept: out.kept.len(),
        dropped,
        canary,
    };
    ctx.out_json(LEAK, &s)
}

fn metrics(ctx: &mut Ctx) -> Result<()> {
    let oracle = ctx.oracle()?;
    let m = DatasetManifest::read(&ctx.p(MANIFEST))?;
    let mut archives = ctx.archives();
    let emb = embed_manifest(&m, &mut archives, &oracle)?;
    let table = evaluate::attribute_table(&m, &emb, &mut archives, ctx.cfg.image)?;
    let (met, scatter) = evaluate::dataset_metrics(&m, &emb, &table)?;
    ctx.out_json(METRICS, &met)?;
    ctx.out_text(ATTRIBUTES, &evaluate::attribute_csv(&table))?;
    ctx.out_text(BOXPLOT, &crate::metrics::boxplot_csv(&met.attributes))?;
    ctx.out_text(SCATTER, &scatter)
}

fn verify(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let oracle = ctx.oracle()?;
    let model = ctx.generator()?;
    let m = DatasetManifest::read(&ctx.p(MANIFEST))?;
    let emb = embed_manifest(&m, &mut ctx.archives(), &oracle)?;
    let centroids = crate::metrics::identity_features(&m, &emb)?;
    let probes = VectorStore::read(&ctx.p(PERTURB_PROBE))?;
    let probe = evaluate::probe_features(&model, cfg.generator.inference_mask, &oracle, &probes, &m.identities())?;
    let (rep, scores) =
        evaluate::nearest_centroid_verification(&centroids, &probe, cfg.verify.folds, cfg.verify.fpr, cfg.seed_for("verify"))?;
    ctx.out_json(VERIFY, &rep)?;
    let mut t = String::from("score\tgenuine\n");
    for s in &scores {
        t.push_str(&format!("{}\t{}\n", s.score, s.genuine as u8));
    }
    ctx.out_text(VERIFY_SCORES, &t)
}

fn report(ctx: &mut Ctx) -> Result<()> {
    let r = evaluate::Report::from_run(ctx.root, ctx.cfg)?;
    ctx.out_json(REPORT, &r)
}
