use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Which image base a row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Random,
    AttropPose,
    LoraPose,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Random, Stage::AttropPose, Stage::LoraPose];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Random => "random",
            Stage::AttropPose => "attrop-pose",
            Stage::LoraPose => "lora-pose",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub identity_id: u64,
    pub image_id: u64,
    pub stage: Stage,
    pub sim_to_identity: f64,
    pub quality: f64,
    /// Archive file name, relative to the manifest's directory.
    pub archive: String,
    /// Record index inside the archive.
    pub offset: u64,
}

pub const MANIFEST_HEADER: &str =
    "identity_id\timage_id\tstage\tsim_to_identity\tquality\tarchive\toffset";

/// Ordered list of dataset rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let m = DatasetManifest { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<ManifestRow> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.rows {
            if !seen.insert((r.identity_id, r.image_id)) {
                return Err(Error::invalid(format!(
                    "duplicate row (identity {}, image {})",
                    r.identity_id, r.image_id
                )));
            }
            if !(-1.0..=1.0).contains(&r.sim_to_identity) {
                return Err(Error::invalid(format!(
                    "identity {} image {}: similarity {} outside [-1, 1]",
                    r.identity_id, r.image_id, r.sim_to_identity
                )));
            }
            if !r.quality.is_finite() {
                return Err(Error::NonFinite { op: "manifest quality" });
            }
            if r.archive.is_empty() || r.archive.contains(['\t', '\n']) {
                return Err(Error::invalid(format!("bad archive name {:?}", r.archive)));
            }
        }
        Ok(())
    }

    /// Identity ids in ascending order.
    pub fn identities(&self) -> Vec<u64> {
        let s: BTreeSet<u64> = self.rows.iter().map(|r| r.identity_id).collect();
        s.into_iter().collect()
    }

    /// Row indices grouped by identity, identities ascending, rows in
    /// manifest order.
    pub fn groups(&self) -> Vec<(u64, Vec<usize>)> {
        let mut map: std::collections::BTreeMap<u64, Vec<usize>> = Default::default();
        for (i, r) in self.rows.iter().enumerate() {
            map.entry(r.identity_id).or_default().push(i);
        }
        map.into_iter().collect()
    }

    pub fn count_by_stage(&self, stage: Stage) -> usize {
        self.rows.iter().filter(|r| r.stage == stage).count()
    }

    /// Keep rows whose index satisfies `keep`; returns (kept, dropped).
    pub fn partition(&self, keep: impl Fn(usize) -> bool) -> (DatasetManifest, DatasetManifest) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, r) in self.rows.iter().enumerate() {
            if keep(i) {
                a.push(r.clone());
            } else {
                b.push(r.clone());
            }
        }
        (DatasetManifest { rows: a }, DatasetManifest { rows: b })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.identity_id, r.image_id, r.stage, r.sim_to_identity, r.quality, r.archive, r.offset
            ));
        }
        s
    }

    pub fn from_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            _ => return Err(Error::format(origin, "missing manifest header")),
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| Error::format(origin, format!("line {}: {what}", n + 2));
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            rows.push(ManifestRow {
                identity_id: f[0].parse().map_err(|_| bad("identity_id"))?,
                image_id: f[1].parse().map_err(|_| bad("image_id"))?,
                stage: f[2].parse().map_err(|_| bad("stage"))?,
                sim_to_identity: f[3].parse().map_err(|_| bad("sim_to_identity"))?,
                quality: f[4].parse().map_err(|_| bad("quality"))?,
                archive: f[5].to_string(),
                offset: f[6].parse().map_err(|_| bad("offset"))?,
            });
        }
        DatasetManifest::new(rows).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DatasetManifest::from_tsv(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: u64, img: u64, sim: f64) -> ManifestRow {
        ManifestRow {
            identity_id: id,
            image_id: img,
            stage: Stage::LoraPose,
            sim_to_identity: sim,
            quality: 21.125,
            archive: "lora-pose.img".into(),
            offset: img,
        }
    }

    #[test]
    fn tsv_round_trip_is_exact() {
        let m = DatasetManifest::new(vec![row(3, 1, 0.1 + 0.2), row(3, 2, -0.7), row(9, 1, 1.0 / 3.0)]).unwrap();
        let back = DatasetManifest::from_tsv(&m.to_tsv(), Path::new("m.tsv")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn duplicates_rejected() {
        assert!(DatasetManifest::new(vec![row(1, 1, 0.5), row(1, 1, 0.6)]).is_err());
        assert!(DatasetManifest::new(vec![row(1, 1, 1.5)]).is_err());
    }

    #[test]
    fn stage_names() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("base".parse::<Stage>().is_err());
    }
}
