//! Dataset assembly: manifests and image archives, identity and
//! perturbation gates, base merging, DBSCAN cleaning and leakage filtering.

mod archive;
mod assemble;
mod dbscan;
mod gate;
mod leak;
mod manifest;

pub use archive::{to_f32_precision, ImageArchive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use assemble::{assemble, AssembleConfig};
pub use dbscan::{dbscan, dbscan_clean, Cleaned, DbscanConfig};
pub(crate) use dbscan::check_aligned;
pub use gate::{gate_identity, gate_perturbation, percentile, Gate, GateConfig, GateDecision};
pub use leak::{leakage_check, LeakCheck, LEAK_THRESHOLD};
pub use manifest::{DatasetManifest, ManifestRow, Stage, MANIFEST_HEADER};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::embedding::{Embedding, OracleEmbedder, VectorStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lazily loaded archives named by manifest rows, resolved against `root`.
#[derive(Debug)]
pub struct Archives {
    root: PathBuf,
    loaded: BTreeMap<String, ImageArchive>,
}

impl Archives {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Archives { root: root.into(), loaded: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, archive: ImageArchive) {
        self.loaded.insert(name.into(), archive);
    }

    pub fn image(&mut self, row: &ManifestRow) -> Result<Tensor> {
        if !self.loaded.contains_key(&row.archive) {
            let a = ImageArchive::read(&self.root.join(&row.archive))?;
            self.loaded.insert(row.archive.clone(), a);
        }
        self.loaded[&row.archive].get(row.offset)
    }
}

/// Oracle features of every manifest row, labelled with the identity id.
pub fn embed_manifest(manifest: &DatasetManifest, archives: &mut Archives, oracle: &OracleEmbedder) -> Result<VectorStore> {
    let mut store = VectorStore::new(oracle.dim_out());
    for r in manifest.rows() {
        let f = oracle.embed(&archives.image(r)?)?;
        store.push_labelled(f.values(), r.identity_id.to_string())?;
    }
    Ok(store)
}

/// Row that fails re-evaluation against the stored images.
#[derive(Clone, Debug, PartialEq)]
pub struct RecheckFailure {
    pub identity_id: u64,
    pub image_id: u64,
    pub detail: String,
}

/// Recompute similarity and quality of every row from its stored image and
/// compare with the recorded values; rows of a gated stage must also pass
/// that gate. `references` maps identity ids to the feature each row's
/// similarity is measured against.
pub fn recheck(
    manifest: &DatasetManifest,
    embeddings: &VectorStore,
    references: &BTreeMap<u64, Embedding>,
    gate_for: impl Fn(Stage) -> Option<Gate>,
    tolerance: f64,
) -> Result<Vec<RecheckFailure>> {
    if manifest.len() != embeddings.len() {
        return Err(Error::invalid("manifest and embeddings differ in length"));
    }
    let mut bad = Vec::new();
    for (i, r) in manifest.rows().iter().enumerate() {
        let reference = references.get(&r.identity_id).ok_or_else(|| {
            Error::invalid(format!("no reference feature for identity {}", r.identity_id))
        })?;
        let d = Gate { min_sim: -1.0, min_quality: f64::NEG_INFINITY }.check(&embeddings.embedding(i), reference)?;
        let mut fail = |detail: String| {
            bad.push(RecheckFailure { identity_id: r.identity_id, image_id: r.image_id, detail })
        };
        if (d.sim - r.sim_to_identity).abs() > tolerance {
            fail(format!("similarity {} recorded, {} recomputed", r.sim_to_identity, d.sim));
        } else if (d.quality - r.quality).abs() > tolerance * r.quality.abs().max(1.0) {
            fail(format!("quality {} recorded, {} recomputed", r.quality, d.quality));
        } else if let Some(g) = gate_for(r.stage) {
            if !(d.sim > g.min_sim && d.quality > g.min_quality) {
                fail(format!("fails gate (sim {}, quality {})", d.sim, d.quality));
            }
        }
    }
    Ok(bad)
}

/// Per-identity reference features from a labelled store.
pub fn references_by_label(store: &VectorStore) -> Result<BTreeMap<u64, Embedding>> {
    let labels = store.labels().ok_or_else(|| Error::invalid("reference store has no labels"))?;
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let id = l.parse().map_err(|_| Error::invalid(format!("label {l:?} is not an identity id")))?;
            Ok((id, store.embedding(i)))
        })
        .collect()
}

/// Archive file name for a stage.
pub fn archive_name(stage: Stage) -> String {
    format!("{stage}.img")
}

pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}
