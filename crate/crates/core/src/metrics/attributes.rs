use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttributeValue {
    Continuous(f64),
    Categorical(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeRow {
    pub identity_id: u64,
    pub image_id: u64,
    pub values: Vec<AttributeValue>,
}

/// Per-image attribute values. A column is continuous when every cell
/// parses as a finite number, categorical otherwise.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttributeTable {
    pub names: Vec<String>,
    pub rows: Vec<AttributeRow>,
}

impl AttributeTable {
    /// CSV with header `identity_id,image_id,<attribute>...`.
    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| Error::format(origin, e.to_string()))?.clone();
        if header.len() < 3 || &header[0] != "identity_id" || &header[1] != "image_id" {
            return Err(Error::format(origin, "header must start identity_id,image_id and name an attribute"));
        }
        let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let mut raw: Vec<(u64, u64, Vec<String>)> = Vec::new();
        for (n, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(origin, e.to_string()))?;
            let bad = |what: &str| Error::format(origin, format!("record {}: {what}", n + 1));
            let id = rec[0].trim().parse().map_err(|_| bad("identity_id"))?;
            let img = rec[1].trim().parse().map_err(|_| bad("image_id"))?;
            raw.push((id, img, rec.iter().skip(2).map(|s| s.trim().to_string()).collect()));
        }
        let numeric: Vec<bool> = (0..names.len())
            .map(|c| raw.iter().all(|r| r.2[c].parse::<f64>().is_ok_and(f64::is_finite)))
            .collect();
        let rows = raw
            .into_iter()
            .map(|(identity_id, image_id, cells)| AttributeRow {
                identity_id,
                image_id,
                values: cells
                    .into_iter()
                    .zip(&numeric)
                    .map(|(c, &num)| {
                        if num {
                            AttributeValue::Continuous(c.parse().unwrap())
                        } else {
                            AttributeValue::Categorical(c)
                        }
                    })
                    .collect(),
            })
            .collect();
        Ok(AttributeTable { names, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AttributeTable::from_csv(&text, path)
    }
}

/// Minimum, quartiles and maximum (linear interpolation between order
/// statistics).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("five-number summary"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Ok(FiveNumber { min: v[0], q1: q(0.25), median: q(0.5), q3: q(0.75), max: v[v.len() - 1] })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttributeStats {
    Continuous {
        avg_mean: f64,
        /// Population standard deviation within each identity, averaged.
        avg_std: f64,
        means: FiveNumber,
        stds: FiveNumber,
    },
    Categorical {
        /// Per-identity category shares, averaged over identities.
        fractions: BTreeMap<String, f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSummary {
    pub name: String,
    pub identities: usize,
    #[serde(flatten)]
    pub stats: AttributeStats,
}

pub fn attribute_stats(table: &AttributeTable) -> Result<Vec<AttributeSummary>> {
    if table.rows.is_empty() || table.names.is_empty() {
        return Err(Error::Empty("attribute table"));
    }
    let mut groups: BTreeMap<u64, Vec<&AttributeRow>> = BTreeMap::new();
    for r in &table.rows {
        if r.values.len() != table.names.len() {
            return Err(Error::invalid(format!("image {} has the wrong number of attributes", r.image_id)));
        }
        groups.entry(r.identity_id).or_default().push(r);
    }
    let n_id = groups.len() as f64;
    let mut out = Vec::new();
    for (c, name) in table.names.iter().enumerate() {
        let continuous = matches!(table.rows[0].values[c], AttributeValue::Continuous(_));
        let stats = if continuous {
            let (mut means, mut stds) = (Vec::new(), Vec::new());
            for rows in groups.values() {
                let v: Vec<f64> = rows
                    .iter()
                    .map(|r| match &r.values[c] {
                        AttributeValue::Continuous(x) => Ok(*x),
                        AttributeValue::Categorical(_) => Err(Error::invalid(format!("column {name} mixes kinds"))),
                    })
                    .collect::<Result<_>>()?;
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
                means.push(m);
                stds.push(var.sqrt());
            }
            AttributeStats::Continuous {
                avg_mean: means.iter().sum::<f64>() / n_id,
                avg_std: stds.iter().sum::<f64>() / n_id,
                means: FiveNumber::of(&means)?,
                stds: FiveNumber::of(&stds)?,
            }
        } else {
            let mut fractions: BTreeMap<String, f64> = BTreeMap::new();
            for rows in groups.values() {
                for r in rows {
                    let key = match &r.values[c] {
                        AttributeValue::Categorical(s) => s.clone(),
                        AttributeValue::Continuous(x) => x.to_string(),
                    };
                    *fractions.entry(key).or_default() += 1.0 / rows.len() as f64 / n_id;
                }
            }
            AttributeStats::Categorical { fractions }
        };
        out.push(AttributeSummary { name: name.clone(), identities: groups.len(), stats });
    }
    Ok(out)
}

/// Plot data: one row per (attribute, statistic) five-number summary.
pub fn boxplot_csv(summaries: &[AttributeSummary]) -> String {
    let mut s = String::from("attribute,statistic,min,q1,median,q3,max\n");
    for a in summaries {
        if let AttributeStats::Continuous { means, stds, .. } = &a.stats {
            for (stat, f) in [("mean", means), ("std", stds)] {
                s.push_str(&format!("{},{stat},{},{},{},{},{}\n", a.name, f.min, f.q1, f.median, f.q3, f.max));
            }
        }
    }
    s
}
