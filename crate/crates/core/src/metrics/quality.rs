use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::embedding::{cosine, Embedding, UnitRows, VectorStore};
use crate::error::{Error, Result};

/// Default similarity below which two identities count as separated.
pub const SEPARATION_THRESHOLD: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub n_total: usize,
    pub n_sep: usize,
    pub d_sep: f64,
    pub threshold: f64,
    /// Highest cosine to any other identity; `None` for a lone identity.
    pub max_similarity: Vec<Option<f64>>,
}

/// Fraction of identities whose highest cosine to every other identity
/// feature stays below `threshold`.
pub fn separability(id_features: &VectorStore, threshold: f64) -> Result<SeparabilityReport> {
    if id_features.is_empty() {
        return Err(Error::Empty("identity features"));
    }
    let unit = UnitRows::from_store(id_features)?;
    let max_similarity: Vec<Option<f64>> = (0..unit.len())
        .map(|i| unit.max_cosine_unit(unit.row(i), Some(i)).map(|(s, _)| s))
        .collect();
    let n_sep = max_similarity
        .iter()
        .filter(|s| s.is_none_or(|s| s < threshold))
        .count();
    Ok(SeparabilityReport {
        n_total: unit.len(),
        n_sep,
        d_sep: n_sep as f64 / unit.len() as f64,
        threshold,
        max_similarity,
    })
}

/// Mean image feature of each identity, identities ascending, labelled
/// with the identity id.
pub fn identity_features(manifest: &DatasetManifest, embeddings: &VectorStore) -> Result<VectorStore> {
    if manifest.len() != embeddings.len() {
        return Err(Error::invalid("manifest and embeddings differ in length"));
    }
    if manifest.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    let mut out = VectorStore::new(embeddings.dim());
    for (id, rows) in manifest.groups() {
        out.push_labelled(&mean_row(embeddings, &rows), id.to_string())?;
    }
    Ok(out)
}

fn mean_row(store: &VectorStore, rows: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; store.dim()];
    for &i in rows {
        for (a, b) in m.iter_mut().zip(store.row(i)) {
            *a += b;
        }
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyMode {
    /// Cosine of each image to its identity's mean feature.
    #[default]
    Centroid,
    /// Mean cosine over all image pairs of an identity.
    Pairwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityConsistency {
    pub identity_id: u64,
    pub images: usize,
    pub consistency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub mode: ConsistencyMode,
    pub n_identities: usize,
    pub per_identity: Vec<IdentityConsistency>,
    pub d_consis: f64,
}

/// Intra-class consistency: per-identity mean similarity, then the mean
/// over identities.
pub fn consistency(manifest: &DatasetManifest, embeddings: &VectorStore, mode: ConsistencyMode) -> Result<ConsistencyReport> {
    if manifest.len() != embeddings.len() {
        return Err(Error::invalid("manifest and embeddings differ in length"));
    }
    if manifest.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    let mut per_identity = Vec::new();
    for (id, rows) in manifest.groups() {
        let c = match mode {
            ConsistencyMode::Centroid => {
                let m = mean_row(embeddings, &rows);
                let centre = Embedding::new(m).map_err(|_| Error::DegenerateIdentity { identity: id })?;
                if centre.norm() == 0.0 {
                    return Err(Error::DegenerateIdentity { identity: id });
                }
                let mut s = 0.0;
                for &i in &rows {
                    s += cosine(embeddings.row(i), centre.values())?;
                }
                s / rows.len() as f64
            }
            ConsistencyMode::Pairwise => {
                if rows.len() < 2 {
                    return Err(Error::invalid(format!(
                        "identity {id}: pairwise consistency needs two images"
                    )));
                }
                let u = {
                    let mut u = UnitRows::new(embeddings.dim());
                    for &i in &rows {
                        u.push(embeddings.row(i))?;
                    }
                    u
                };
                let (mut s, mut n) = (0.0, 0usize);
                for a in 0..u.len() {
                    for b in a + 1..u.len() {
                        s += crate::tensor::kernels::dot(u.row(a), u.row(b));
                        n += 1;
                    }
                }
                s / n as f64
            }
        };
        per_identity.push(IdentityConsistency { identity_id: id, images: rows.len(), consistency: c });
    }
    let d_consis = per_identity.iter().map(|p| p.consistency).sum::<f64>() / per_identity.len() as f64;
    Ok(ConsistencyReport { mode, n_identities: per_identity.len(), per_identity, d_consis })
}

/// Identity id to row-index map for a labelled store.
pub fn label_index(store: &VectorStore) -> Result<BTreeMap<u64, usize>> {
    let labels = store.labels().ok_or_else(|| Error::invalid("store has no labels"))?;
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.parse()
                .map(|id| (id, i))
                .map_err(|_| Error::invalid(format!("label {l:?} is not an identity id")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ManifestRow, Stage};

    fn manifest(ids: &[u64]) -> DatasetManifest {
        DatasetManifest::new(
            ids.iter()
                .enumerate()
                .map(|(i, &id)| ManifestRow {
                    identity_id: id,
                    image_id: i as u64,
                    stage: Stage::Random,
                    sim_to_identity: 0.0,
                    quality: 1.0,
                    archive: "a.img".into(),
                    offset: i as u64,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn orthogonal_identities_are_separated() {
        let s = VectorStore::from_rows(3, &[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap();
        assert_eq!(separability(&s, SEPARATION_THRESHOLD).unwrap().d_sep, 1.0);
    }

    #[test]
    fn duplicates_are_not() {
        let s = VectorStore::from_rows(2, &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = separability(&s, 0.4).unwrap();
        assert_eq!((r.n_sep, r.n_total), (1, 3));
        assert!((r.d_sep - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_identity_is_vacuously_separated() {
        let s = VectorStore::from_rows(2, &[vec![1.0, 0.0]]).unwrap();
        let r = separability(&s, 0.4).unwrap();
        assert_eq!((r.d_sep, r.max_similarity[0]), (1.0, None));
        assert!(separability(&VectorStore::new(2), 0.4).is_err());
    }

    #[test]
    fn identical_images_are_fully_consistent() {
        let m = manifest(&[1, 1, 2, 2]);
        let e = VectorStore::from_rows(2, &[vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 3.0], vec![0.0, 3.0]]).unwrap();
        for mode in [ConsistencyMode::Centroid, ConsistencyMode::Pairwise] {
            let r = consistency(&m, &e, mode).unwrap();
            assert!((r.d_consis - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn antipodal_pair_is_degenerate() {
        let m = manifest(&[4, 4]);
        let e = VectorStore::from_rows(2, &[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        match consistency(&m, &e, ConsistencyMode::Centroid) {
            Err(Error::DegenerateIdentity { identity: 4 }) => {}
            other => panic!("{other:?}"),
        }
    }
}
