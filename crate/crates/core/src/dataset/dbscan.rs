use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::embedding::{UnitRows, VectorStore};
use crate::error::{Error, Result};
use crate::tensor::kernels::dot;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbscanConfig {
    /// Neighbourhood radius in cosine distance (`1 - cos`), inclusive.
    pub eps: f64,
    /// Neighbours, counting the point itself, needed for a core point.
    pub min_pts: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        DbscanConfig { eps: 0.5, min_pts: 5 }
    }
}

impl DbscanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) || self.min_pts == 0 {
            return Err(Error::Config(format!("bad dbscan parameters {self:?}")));
        }
        Ok(())
    }
}

/// Cluster label per point; `None` marks noise. Clusters are numbered in
/// order of their first core point.
pub fn dbscan(points: &UnitRows, cfg: &DbscanConfig) -> Result<Vec<Option<usize>>> {
    cfg.validate()?;
    let n = points.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| 1.0 - dot(points.row(i), points.row(j)) <= cfg.eps)
                .collect()
        })
        .collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        if neighbours[i].len() < cfg.min_pts {
            continue;
        }
        let c = next;
        next += 1;
        label[i] = Some(c);
        let mut queue: Vec<usize> = neighbours[i].clone();
        while let Some(j) = queue.pop() {
            if label[j].is_none() {
                label[j] = Some(c);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            if neighbours[j].len() >= cfg.min_pts {
                queue.extend(neighbours[j].iter().copied().filter(|&k| !visited[k] || label[k].is_none()));
            }
        }
    }
    Ok(label)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cleaned {
    pub kept: DatasetManifest,
    pub dropped: DatasetManifest,
    /// Identities too small to cluster, passed through untouched.
    pub skipped: Vec<u64>,
}

pub(crate) fn check_aligned(manifest: &DatasetManifest, embeddings: &VectorStore) -> Result<()> {
    if manifest.len() != embeddings.len() {
        return Err(Error::invalid(format!(
            "{} manifest rows but {} embeddings",
            manifest.len(),
            embeddings.len()
        )));
    }
    Ok(())
}

/// Drop per-identity DBSCAN noise. Row `i` of `embeddings` belongs to
/// manifest row `i`.
pub fn dbscan_clean(manifest: &DatasetManifest, embeddings: &VectorStore, cfg: &DbscanConfig) -> Result<Cleaned> {
    check_aligned(manifest, embeddings)?;
    cfg.validate()?;
    let mut noise = vec![false; manifest.len()];
    let mut skipped = Vec::new();
    for (id, rows) in manifest.groups() {
        if rows.len() < cfg.min_pts {
            log::warn!("identity {id}: {} images, fewer than min_pts; kept as is", rows.len());
            skipped.push(id);
            continue;
        }
        let mut u = UnitRows::new(embeddings.dim());
        for &i in &rows {
            u.push(embeddings.row(i))?;
        }
        for (&i, l) in rows.iter().zip(dbscan(&u, cfg)?) {
            noise[i] = l.is_none();
        }
    }
    let (kept, dropped) = manifest.partition(|i| !noise[i]);
    Ok(Cleaned { kept, dropped, skipped })
}
