use super::dbscan::check_aligned;
use super::manifest::DatasetManifest;
use crate::embedding::{UnitRows, VectorStore, SCAN_BLOCK_ROWS};
use crate::error::{Error, Result};

/// Default cosine above which an image counts as leaked.
pub const LEAK_THRESHOLD: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct LeakCheck {
    pub kept: DatasetManifest,
    pub dropped: DatasetManifest,
    /// Highest reference similarity of every dropped row, in drop order.
    pub dropped_similarity: Vec<f64>,
}

/// Drop every image whose embedding has cosine `> threshold` with any
/// reference identity.
pub fn leakage_check(
    manifest: &DatasetManifest,
    embeddings: &VectorStore,
    references: &VectorStore,
    threshold: f64,
) -> Result<LeakCheck> {
    check_aligned(manifest, embeddings)?;
    if references.is_empty() {
        return Err(Error::Empty("reference identities"));
    }
    if references.dim() != embeddings.dim() {
        return Err(Error::Shape {
            op: "leakage_check",
            lhs: vec![embeddings.dim()],
            rhs: vec![references.dim()],
        });
    }
    let images = UnitRows::from_store(embeddings)?;
    let mut best = vec![f64::NEG_INFINITY; manifest.len()];
    let mut start = 0;
    while start < references.len() {
        let end = (start + SCAN_BLOCK_ROWS).min(references.len());
        let mut block = UnitRows::new(references.dim());
        for j in start..end {
            block.push(references.row(j))?;
        }
        for (i, b) in best.iter_mut().enumerate() {
            let (s, _) = block.max_cosine_unit(images.row(i), None).expect("non-empty block");
            *b = b.max(s);
        }
        start = end;
    }
    let (kept, dropped) = manifest.partition(|i| best[i] <= threshold);
    let dropped_similarity = best.into_iter().filter(|&s| s > threshold).collect();
    Ok(LeakCheck { kept, dropped, dropped_similarity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ManifestRow, Stage};

    fn manifest(n: u64) -> DatasetManifest {
        DatasetManifest::new(
            (0..n)
                .map(|i| ManifestRow {
                    identity_id: i / 2,
                    image_id: i,
                    stage: Stage::Random,
                    sim_to_identity: 0.8,
                    quality: 20.0,
                    archive: "random.img".into(),
                    offset: i,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn orthogonal_references_drop_nothing() {
        let emb = VectorStore::from_rows(3, &[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
        let refs = VectorStore::from_rows(3, &[vec![0.0, 0.0, 1.0]]).unwrap();
        let out = leakage_check(&manifest(2), &emb, &refs, LEAK_THRESHOLD).unwrap();
        assert_eq!(out.kept.len(), 2);
    }

    #[test]
    fn drops_above_threshold_and_is_idempotent() {
        let emb = VectorStore::from_rows(2, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        let refs = VectorStore::from_rows(2, &[vec![3.0, 0.0]]).unwrap();
        let m = manifest(3);
        let out = leakage_check(&m, &emb, &refs, 0.4).unwrap();
        let dropped: Vec<u64> = out.dropped.rows().iter().map(|r| r.image_id).collect();
        assert_eq!(dropped, vec![0, 2]);
        assert_eq!(out.dropped_similarity, vec![1.0, 0.6]);
        let sub = VectorStore::from_rows(2, &[vec![0.0, 1.0]]).unwrap();
        let again = leakage_check(&out.kept, &sub, &refs, 0.4).unwrap();
        assert_eq!(again.kept, out.kept);
        assert!(leakage_check(&m, &emb, &VectorStore::new(2), 0.4).is_err());
    }
}
