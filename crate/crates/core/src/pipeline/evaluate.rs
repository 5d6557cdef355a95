use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::read_json;
use super::stages::{paths::*, CleanSummary, GateCounts, IdentitySummary, LeakSummary};
use crate::attrop::Inference;
use crate::dataset::{to_f32_precision, Archives, DatasetManifest, Gate, Stage};
use crate::embedding::{cosine, OracleEmbedder, VectorStore};
use crate::error::{Error, Result};
use crate::generator::toy::pose_statistic;
use crate::generator::{GeneratorModel, ImageShape};
use crate::metrics::{
    attribute_stats, consistency, identity_features, kfold_accuracy, label_index, separability, tpr_at_fpr,
    AttributeRow, AttributeSummary, AttributeTable, AttributeValue, ConsistencyMode, ConsistencyReport, KFoldReport,
    LabeledScore, RateAtThreshold, ScoreSet, SeparabilityReport, SEPARATION_THRESHOLD,
};
use crate::rng;
use crate::sampler::{perturb_store, PerturbationSpec};

/// Per-image pose, quality and stage.
pub fn attribute_table(
    manifest: &DatasetManifest,
    embeddings: &VectorStore,
    archives: &mut Archives,
    shape: ImageShape,
) -> Result<AttributeTable> {
    crate::dataset::check_aligned(manifest, embeddings)?;
    let mut rows = Vec::with_capacity(manifest.len());
    for (i, r) in manifest.rows().iter().enumerate() {
        let img = archives.image(r)?;
        rows.push(AttributeRow {
            identity_id: r.identity_id,
            image_id: r.image_id,
            values: vec![
                AttributeValue::Continuous(pose_statistic(&img, shape)?),
                AttributeValue::Continuous(embeddings.embedding(i).norm()),
                AttributeValue::Categorical(r.stage.to_string()),
            ],
        });
    }
    Ok(AttributeTable {
        names: vec!["pose".into(), "quality".into(), "stage".into()],
        rows,
    })
}

pub fn attribute_csv(table: &AttributeTable) -> String {
    let mut s = format!("identity_id,image_id,{}\n", table.names.join(","));
    for r in &table.rows {
        s.push_str(&format!("{},{}", r.identity_id, r.image_id));
        for v in &r.values {
            match v {
                AttributeValue::Continuous(x) => s.push_str(&format!(",{x}")),
                AttributeValue::Categorical(c) => s.push_str(&format!(",{c}")),
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub images: usize,
    pub identities: usize,
    pub per_stage: BTreeMap<String, usize>,
    pub separability: SeparabilityReport,
    pub consistency: ConsistencyReport,
    pub consistency_pairwise: ConsistencyReport,
    pub attributes: Vec<AttributeSummary>,
}

/// Dataset-level metrics plus the per-identity scatter table
/// (`identity_id,images,max_similarity,consistency`).
pub fn dataset_metrics(
    manifest: &DatasetManifest,
    embeddings: &VectorStore,
    attributes: &AttributeTable,
) -> Result<(DatasetMetrics, String)> {
    if manifest.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    let feats = identity_features(manifest, embeddings)?;
    let sep = separability(&feats, SEPARATION_THRESHOLD)?;
    let cons = consistency(manifest, embeddings, ConsistencyMode::Centroid)?;
    let pair = consistency(manifest, embeddings, ConsistencyMode::Pairwise)?;
    let per_stage = Stage::ALL
        .iter()
        .map(|&s| (s.to_string(), manifest.count_by_stage(s)))
        .collect();
    let index = label_index(&feats)?;
    let mut scatter = String::from("identity_id,images,max_similarity,consistency\n");
    for c in &cons.per_identity {
        let m = index.get(&c.identity_id).and_then(|&i| sep.max_similarity[i]);
        let m = m.map(|x| x.to_string()).unwrap_or_default();
        scatter.push_str(&format!("{},{},{},{}\n", c.identity_id, c.images, m, c.consistency));
    }
    let met = DatasetMetrics {
        images: manifest.len(),
        identities: feats.len(),
        per_stage,
        separability: sep,
        consistency: cons,
        consistency_pairwise: pair,
        attributes: attribute_stats(attributes)?,
    };
    Ok((met, scatter))
}

/// Features of images generated from held-out perturbations, restricted
/// to `identities` and labelled by identity id.
pub fn probe_features(
    model: &GeneratorModel,
    mask_ratio: f64,
    oracle: &OracleEmbedder,
    probes: &VectorStore,
    identities: &[u64],
) -> Result<VectorStore> {
    let labels = probes.labels().ok_or_else(|| Error::invalid("probe store has no labels"))?;
    let inf = Inference::new(model, mask_ratio)?;
    let mut out = VectorStore::new(oracle.dim_out());
    for (i, l) in labels.iter().enumerate() {
        let Ok(id) = l.parse::<u64>() else {
            return Err(Error::invalid(format!("probe label {l:?} is not an identity id")));
        };
        if identities.binary_search(&id).is_err() {
            continue;
        }
        let img = to_f32_precision(&inf.generate(&probes.embedding(i))?);
        out.push_labelled(oracle.embed(&img)?.values(), l.clone())?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub probes: usize,
    pub pairs: usize,
    /// Fraction of probes whose nearest centroid is their own.
    pub identification_accuracy: f64,
    pub kfold: KFoldReport,
    pub tpr: RateAtThreshold,
}

/// Each probe yields a genuine pair (its own centroid) and an impostor pair
/// (a seeded other centroid), interleaved in that order.
pub fn nearest_centroid_verification(
    centroids: &VectorStore,
    probes: &VectorStore,
    folds: usize,
    fpr: f64,
    seed: u64,
) -> Result<(VerificationReport, Vec<LabeledScore>)> {
    if centroids.len() < 2 {
        return Err(Error::invalid("verification needs at least two identities"));
    }
    if probes.is_empty() {
        return Err(Error::Empty("probe features"));
    }
    let index = label_index(centroids)?;
    let labels = probes.labels().ok_or_else(|| Error::invalid("probe store has no labels"))?;
    let mut r = rng::stream(seed, "impostor", 0);
    let mut pairs = Vec::with_capacity(2 * probes.len());
    let mut scores = ScoreSet { genuine: Vec::new(), impostor: Vec::new() };
    let mut hits = 0usize;
    for (i, l) in labels.iter().enumerate() {
        let own = l
            .parse::<u64>()
            .ok()
            .and_then(|id| index.get(&id).copied())
            .ok_or_else(|| Error::invalid(format!("probe label {l:?} has no centroid")))?;
        let p = probes.row(i);
        let sims = (0..centroids.len())
            .map(|c| cosine(p, centroids.row(c)))
            .collect::<Result<Vec<f64>>>()?;
        let best = (0..sims.len()).fold(0, |b, c| if sims[c] > sims[b] { c } else { b });
        hits += usize::from(best == own);
        let mut other = r.random_range(0..centroids.len() - 1);
        if other >= own {
            other += 1;
        }
        pairs.push(LabeledScore { score: sims[own], genuine: true });
        pairs.push(LabeledScore { score: sims[other], genuine: false });
        scores.genuine.push(sims[own]);
        scores.impostor.push(sims[other]);
    }
    let rep = VerificationReport {
        probes: probes.len(),
        pairs: pairs.len(),
        identification_accuracy: hits as f64 / probes.len() as f64,
        kfold: kfold_accuracy(&pairs, folds)?,
        tpr: tpr_at_fpr(&scores, fpr)?,
    };
    Ok((rep, pairs))
}

/// One gated-versus-ungated comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub seed: u64,
    /// Identities whose gated quota filled; both datasets are restricted
    /// to them.
    pub identities: usize,
    pub gated_images: usize,
    pub ungated_images: usize,
    pub gated_consistency: f64,
    pub ungated_consistency: f64,
    pub gated_accuracy: f64,
    pub ungated_accuracy: f64,
}

/// Build two datasets from one candidate pool, the first `keep` gated
/// images per identity against the first `keep` regardless of the gate,
/// and score both by nearest-centroid verification on held-out probes.
/// Identities whose gated quota does not fill are left out of both.
#[allow(clippy::too_many_arguments)]
pub fn gating_ablation(
    model: &GeneratorModel,
    mask_ratio: f64,
    oracle: &OracleEmbedder,
    identities: &VectorStore,
    pool: &PerturbationSpec,
    probes: &PerturbationSpec,
    keep: usize,
    gate: &Gate,
    folds: usize,
    seed: u64,
) -> Result<AblationOutcome> {
    let inf = Inference::new(model, mask_ratio)?;
    let cands = perturb_store(identities, pool, rng::derive_seed(seed, "ablation-pool", 0))?;
    let labels = cands.labels().unwrap_or_default().to_vec();
    let mut f_id = BTreeMap::new();
    for i in 0..identities.len() {
        let v = identities.embedding(i);
        let img = to_f32_precision(&inf.generate(&v.normalized()?.scaled(0.5 * (pool.norm_lo + pool.norm_hi)))?);
        f_id.insert(i.to_string(), oracle.embed(&img)?);
    }
    let (mut gated, mut ungated) = (VectorStore::new(oracle.dim_out()), VectorStore::new(oracle.dim_out()));
    let (mut g_rows, mut u_rows) = (Vec::new(), Vec::new());
    let mut order: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        order.entry(l.as_str()).or_default().push(i);
    }
    let mut taken: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (l, mut idx) in order {
        let id: u64 = l.parse().map_err(|_| Error::invalid("ablation labels must be numeric"))?;
        idx.shuffle(&mut rng::stream(seed, "ablation-order", id));
        let t = taken.entry(l.to_string()).or_default();
        for i in idx {
            if t.0 >= keep && t.1 >= keep {
                break;
            }
            let img = to_f32_precision(&inf.generate(&cands.embedding(i))?);
            let f = oracle.embed(&img)?;
            if t.1 < keep {
                t.1 += 1;
                ungated.push_labelled(f.values(), l)?;
                u_rows.push(ablation_row(id, i));
            }
            if t.0 < keep && gate.check(&f, &f_id[l])?.accept {
                t.0 += 1;
                gated.push_labelled(f.values(), l)?;
                g_rows.push(ablation_row(id, i));
            }
        }
    }
    let full: Vec<u64> = taken
        .iter()
        .filter(|(_, t)| t.0 == keep)
        .filter_map(|(l, _)| l.parse().ok())
        .collect::<std::collections::BTreeSet<u64>>()
        .into_iter()
        .collect();
    if full.len() < 2 {
        return Err(Error::invalid("fewer than two identities filled their gated quota"));
    }
    let (g_man, gated) = restrict(g_rows, &gated, &full)?;
    let (u_man, ungated) = restrict(u_rows, &ungated, &full)?;
    let held = perturb_store(identities, probes, rng::derive_seed(seed, "ablation-probe", 0))?;
    let probe = probe_features(model, mask_ratio, oracle, &held, &full)?;
    let score = |m: &DatasetManifest, e: &VectorStore| -> Result<(f64, f64)> {
        let c = consistency(m, e, ConsistencyMode::Centroid)?.d_consis;
        let (rep, _) = nearest_centroid_verification(
            &identity_features(m, e)?,
            &probe,
            folds,
            0.1,
            rng::derive_seed(seed, "ablation-verify", 0),
        )?;
        Ok((c, rep.kfold.mean_accuracy))
    };
    let (gc, ga) = score(&g_man, &gated)?;
    let (uc, ua) = score(&u_man, &ungated)?;
    Ok(AblationOutcome {
        seed,
        identities: full.len(),
        gated_images: gated.len(),
        ungated_images: ungated.len(),
        gated_consistency: gc,
        ungated_consistency: uc,
        gated_accuracy: ga,
        ungated_accuracy: ua,
    })
}

/// Run the configured ablation on a finished run and write its report.
pub fn run_ablation(cfg: &PipelineConfig, root: &Path) -> Result<Vec<AblationOutcome>> {
    cfg.validate()?;
    let (model, _) = crate::generator::load_model(&root.join(GENERATOR))?;
    let oracle = OracleEmbedder::new(cfg.oracle_config())?;
    let ids = VectorStore::read(&root.join(IDENTITIES))?;
    let mut relabelled = VectorStore::new(ids.dim());
    for i in 0..ids.len() {
        relabelled.push_labelled(ids.row(i), i.to_string())?;
    }
    let (pool, probes) = cfg.ablation_specs();
    let out = (0..cfg.ablation.seeds as u64)
        .map(|s| {
            gating_ablation(
                &model,
                cfg.generator.inference_mask,
                &oracle,
                &relabelled,
                &pool,
                &probes,
                cfg.ablation.keep,
                &cfg.gates.perturbation,
                cfg.verify.folds,
                rng::derive_seed(cfg.seed, "ablation", s),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    super::write_json(&root.join(ABLATION), &out)?;
    Ok(out)
}

fn restrict(
    rows: Vec<crate::dataset::ManifestRow>,
    store: &VectorStore,
    keep: &[u64],
) -> Result<(DatasetManifest, VectorStore)> {
    let mut out = VectorStore::new(store.dim());
    let mut kept = Vec::new();
    for (i, r) in rows.into_iter().enumerate() {
        if keep.binary_search(&r.identity_id).is_ok() {
            out.push_labelled(store.row(i), r.identity_id.to_string())?;
            kept.push(r);
        }
    }
    Ok((DatasetManifest::new(kept)?, out))
}

fn ablation_row(identity_id: u64, i: usize) -> crate::dataset::ManifestRow {
    crate::dataset::ManifestRow {
        identity_id,
        image_id: i as u64,
        stage: Stage::Random,
        sim_to_identity: 0.0,
        quality: 0.0,
        archive: "ablation.img".into(),
        offset: i as u64,
    }
}

/// Consolidated run summary assembled from the stage reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_sha256: String,
    pub seed: u64,
    pub images: usize,
    pub identities: usize,
    pub per_stage: BTreeMap<String, usize>,
    pub d_sep: f64,
    pub d_consis: f64,
    pub d_consis_pairwise: f64,
    pub identity_gate: IdentitySummary,
    pub gates: GateCounts,
    pub clean: CleanSummary,
    pub leak: LeakSummary,
    pub verification: VerificationReport,
}

impl Report {
    pub fn from_run(root: &Path, cfg: &PipelineConfig) -> Result<Self> {
        let met: DatasetMetrics = read_json(&root.join(METRICS))?;
        if met.images == 0 {
            return Err(Error::Empty("manifest"));
        }
        Ok(Report {
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            images: met.images,
            identities: met.identities,
            per_stage: met.per_stage,
            d_sep: met.separability.d_sep,
            d_consis: met.consistency.d_consis,
            d_consis_pairwise: met.consistency_pairwise.d_consis,
            identity_gate: read_json(&root.join(IDENTITY_SUMMARY))?,
            gates: read_json(&root.join(GATES))?,
            clean: read_json(&root.join(CLEAN))?,
            leak: read_json(&root.join(LEAK))?,
            verification: read_json(&root.join(VERIFY))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(rows: &[(&str, Vec<f64>)]) -> VectorStore {
        let mut s = VectorStore::new(rows[0].1.len());
        for (l, r) in rows {
            s.push_labelled(r, *l).unwrap();
        }
        s
    }

    #[test]
    fn verification_pairs_are_interleaved() {
        let c = store(&[("0", vec![1.0, 0.0]), ("1", vec![0.0, 1.0])]);
        let p = store(&[("0", vec![1.0, 0.1]), ("1", vec![0.2, 1.0]), ("0", vec![1.0, -0.1]), ("1", vec![-0.2, 1.0])]);
        let (rep, pairs) = nearest_centroid_verification(&c, &p, 2, 0.5, 3).unwrap();
        assert_eq!(rep.pairs, 8);
        assert_eq!(rep.identification_accuracy, 1.0);
        assert!(pairs.iter().step_by(2).all(|s| s.genuine));
        assert!(pairs.iter().skip(1).step_by(2).all(|s| !s.genuine));
        assert_eq!(rep.kfold.mean_accuracy, 1.0);
    }

    #[test]
    fn probe_without_centroid_is_an_error() {
        let c = store(&[("0", vec![1.0, 0.0]), ("1", vec![0.0, 1.0])]);
        let p = store(&[("7", vec![1.0, 0.1])]);
        assert!(nearest_centroid_verification(&c, &p, 1, 0.5, 3).is_err());
    }
}
