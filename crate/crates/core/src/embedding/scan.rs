use super::VectorStore;
use crate::error::{Error, Result};
use crate::tensor::kernels::dot;

/// Rows per pass of a similarity scan; only one block of normalized rows is
/// resident at a time.
pub const SCAN_BLOCK_ROWS: usize = 4096;

/// Unit-normalized copy of a set of vectors, for repeated scans against the
/// same pool.
#[derive(Clone, Debug, Default)]
pub struct UnitRows {
    dim: usize,
    data: Vec<f64>,
}

impl UnitRows {
    pub fn new(dim: usize) -> Self {
        UnitRows {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_store(store: &VectorStore) -> Result<Self> {
        let mut u = UnitRows::new(store.dim());
        for r in store.rows() {
            u.push(r)?;
        }
        Ok(u)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Shape {
                op: "unit_rows.push",
                lhs: vec![self.dim],
                rhs: vec![row.len()],
            });
        }
        let n = dot(row, row).sqrt();
        if n == 0.0 {
            return Err(Error::ZeroVector { op: "unit_rows.push" });
        }
        self.data.extend(row.iter().map(|v| v / n));
        Ok(())
    }

    /// Largest cosine between `unit_query` (already normalized) and any row,
    /// skipping `exclude`. Returns `None` when nothing is left to compare.
    pub fn max_cosine_unit(&self, unit_query: &[f64], exclude: Option<usize>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, r) in self.data.chunks_exact(self.dim).enumerate() {
            if Some(i) == exclude {
                continue;
            }
            let c = dot(unit_query, r);
            if best.is_none_or(|(b, _)| c > b) {
                best = Some((c, i));
            }
        }
        best
    }

    /// True when any row has cosine `>= threshold` with the unit query.
    pub fn any_at_least(&self, unit_query: &[f64], threshold: f64) -> bool {
        self.data
            .chunks_exact(self.dim)
            .any(|r| dot(unit_query, r) >= threshold)
    }
}

fn unit(query: &[f64]) -> Result<Vec<f64>> {
    let n = dot(query, query).sqrt();
    if n == 0.0 {
        return Err(Error::ZeroVector { op: "cosine scan" });
    }
    Ok(query.iter().map(|v| v / n).collect())
}

/// Exact maximum cosine similarity between `query` and the rows of `pool`,
/// skipping row `exclude`. Rows are normalized one block at a time.
pub fn pairwise_max_cosine(
    query: &[f64],
    pool: &VectorStore,
    exclude: Option<usize>,
) -> Result<(f64, usize)> {
    if query.len() != pool.dim() {
        return Err(Error::Shape {
            op: "pairwise_max_cosine",
            lhs: vec![query.len()],
            rhs: vec![pool.dim()],
        });
    }
    let q = unit(query)?;
    let dim = pool.dim();
    let mut best: Option<(f64, usize)> = None;
    let mut block = Vec::with_capacity(SCAN_BLOCK_ROWS * dim);
    let mut start = 0;
    while start < pool.len() {
        let end = (start + SCAN_BLOCK_ROWS).min(pool.len());
        block.clear();
        for i in start..end {
            let r = pool.row(i);
            let n = dot(r, r).sqrt();
            if n == 0.0 && Some(i) != exclude {
                return Err(Error::ZeroVector { op: "pairwise_max_cosine" });
            }
            block.extend(r.iter().map(|v| if n == 0.0 { 0.0 } else { v / n }));
        }
        for (off, r) in block.chunks_exact(dim).enumerate() {
            let i = start + off;
            if Some(i) == exclude {
                continue;
            }
            let c = dot(&q, r).clamp(-1.0, 1.0);
            if best.is_none_or(|(b, _)| c > b) {
                best = Some((c, i));
            }
        }
        start = end;
    }
    best.ok_or(Error::Empty("pool after exclusion"))
}

/// Maximum cosine of `query` against every row of `pool` (no exclusion).
pub fn max_cosine_against(query: &[f64], pool: &VectorStore) -> Result<(f64, usize)> {
    pairwise_max_cosine(query, pool, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn orthonormal_pair() {
        let pool = VectorStore::from_rows(2, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (s, i) = pairwise_max_cosine(&[1.0, 0.0], &pool, Some(0)).unwrap();
        assert_eq!((s, i), (0.0, 1));
    }

    #[test]
    fn duplicate_gives_one() {
        let pool = VectorStore::from_rows(3, &[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        let (s, _) = pairwise_max_cosine(&[1.0, 2.0, 3.0], &pool, Some(0)).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_after_exclusion() {
        let pool = VectorStore::from_rows(2, &[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            pairwise_max_cosine(&[1.0, 0.0], &pool, Some(0)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn agrees_with_naive_scan_across_blocks() {
        let mut r = rng::stream(5, "scan", 0);
        let n = SCAN_BLOCK_ROWS + 37;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| Tensor::randn(&[8], 1.0, &mut r).into_data())
            .collect();
        let pool = VectorStore::from_rows(8, &rows).unwrap();
        for q in [0usize, 17, n - 1] {
            let (s, i) = pairwise_max_cosine(&rows[q], &pool, Some(q)).unwrap();
            let (bs, bi) = rows
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != q)
                .map(|(j, r)| (cosine(&rows[q], r).unwrap(), j))
                .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
            assert_eq!(i, bi);
            assert!((s - bs).abs() < 1e-12);
        }
    }
}
