use std::fs;
use std::path::{Path, PathBuf};

use super::Embedding;
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"VEC2";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// Row-major collection of equal-dimension vectors with optional identity
/// labels.
///
/// In memory rows are `f64`; on disk they are little-endian `f32`, so a
/// write/read round trip rounds every value to single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorStore {
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<String>>,
}

/// Companion label file: `<store>.labels`, one identity id per line.
pub fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

impl VectorStore {
    pub fn new(dim: usize) -> Self {
        VectorStore {
            dim,
            data: Vec::new(),
            labels: None,
        }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut s = VectorStore::new(dim);
        for r in rows {
            s.push(r)?;
        }
        Ok(s)
    }

    pub fn from_embeddings(dim: usize, rows: &[Embedding]) -> Result<Self> {
        let mut s = VectorStore::new(dim);
        for r in rows {
            s.push(r.values())?;
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn embedding(&self, i: usize) -> Embedding {
        Embedding(self.row(i).to_vec())
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Shape {
                op: "store.push",
                lhs: vec![self.dim],
                rhs: vec![row.len()],
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "store.push" });
        }
        if self.labels.is_some() {
            return Err(Error::invalid("push without label into a labelled store"));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn push_labelled(&mut self, row: &[f64], label: impl Into<String>) -> Result<()> {
        if self.labels.is_none() && !self.is_empty() {
            return Err(Error::invalid("labelled push into an unlabelled store"));
        }
        let label = label.into();
        if label.contains('\n') {
            return Err(Error::invalid("label contains a newline"));
        }
        let labels = self.labels.take().unwrap_or_default();
        let res = self.push(row);
        let mut labels = labels;
        if res.is_ok() {
            labels.push(label);
        }
        self.labels = Some(labels);
        res
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Vec<String>) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} rows",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    /// Same values rounded through `f32`.
    pub fn to_f32_precision(&self) -> VectorStore {
        VectorStore {
            dim: self.dim,
            data: self.data.iter().map(|&v| f64::from(v as f32)).collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(origin, "truncated vector store header"));
        }
        if &bytes[0..4] != STORE_MAGIC {
            return Err(Error::format(origin, "bad vector store magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(Error::format(
                origin,
                format!("payload length {} does not match {count}×{dim}", bytes.len() - HEADER_LEN),
            ));
        }
        if dim == 0 && count > 0 {
            return Err(Error::format(origin, "zero dimension with rows"));
        }
        let data: Vec<f64> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(origin, "non-finite value in payload"));
        }
        Ok(VectorStore {
            dim,
            data,
            labels: None,
        })
    }

    /// Writes the store and, when labelled, its companion label file.
    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())?;
        if let Some(labels) = &self.labels {
            let mut text = String::new();
            for l in labels {
                text.push_str(l);
                text.push('\n');
            }
            crate::io::write_atomic(&labels_path(path), text.as_bytes())?;
        } else {
            let lp = labels_path(path);
            if lp.exists() {
                fs::remove_file(&lp).map_err(|e| Error::io(&lp, e))?;
            }
        }
        Ok(())
    }

    /// Reads a store, attaching labels when the companion file exists.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut store = VectorStore::from_bytes(&bytes, path)?;
        let lp = labels_path(path);
        if lp.exists() {
            let text = fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
            let labels: Vec<String> = text.lines().map(str::to_owned).collect();
            if labels.len() != store.len() {
                return Err(Error::format(
                    &lp,
                    format!("{} labels for {} rows", labels.len(), store.len()),
                ));
            }
            store.labels = Some(labels);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let s = VectorStore::from_rows(2, &[vec![1.0, 2.0]]).unwrap();
        let b = s.to_bytes();
        assert_eq!(&b[..4], b"VEC2");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn truncated_payload_rejected() {
        let s = VectorStore::from_rows(3, &[vec![1.0, 2.0, 3.0]]).unwrap();
        let b = s.to_bytes();
        assert!(VectorStore::from_bytes(&b[..b.len() - 1], Path::new("x")).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(VectorStore::from_bytes(&bad, Path::new("x")).is_err());
    }

    #[test]
    fn labels_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ids.vec2");
        let mut s = VectorStore::new(2);
        s.push_labelled(&[1.0, 0.0], "7").unwrap();
        s.push_labelled(&[0.0, 1.0], "9").unwrap();
        s.write(&p).unwrap();
        let back = VectorStore::read(&p).unwrap();
        assert_eq!(back.labels().unwrap(), &["7".to_string(), "9".to_string()]);
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn round_trip_is_f32_exact(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 5), 0..20)) {
            let s = VectorStore::from_rows(5, &rows).unwrap();
            let back = VectorStore::from_bytes(&s.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.len(), rows.len());
            prop_assert_eq!(back, s.to_f32_precision());
        }
    }
}
