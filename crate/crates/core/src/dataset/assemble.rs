use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestRow, Stage};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssembleConfig {
    /// Images per identity in the output.
    pub k: usize,
    /// Base-1 slots replaced by pose images.
    pub replace: usize,
    /// Replacement slots taken from the attribute-search base; the LoRA
    /// base fills the rest.
    pub attrop_share: usize,
}

impl Default for AssembleConfig {
    fn default() -> Self {
        AssembleConfig { k: 50, replace: 40, attrop_share: 20 }
    }
}

impl AssembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.replace > self.k || self.attrop_share > self.replace {
            return Err(Error::Config(format!(
                "assemble needs 0 < k, replace <= k and attrop_share <= replace (got {self:?})"
            )));
        }
        Ok(())
    }
}

fn pick<R: rand::Rng + ?Sized>(rows: &[&ManifestRow], n: usize, rng: &mut R) -> Vec<ManifestRow> {
    let mut idx = sample(rng, rows.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i].clone()).collect()
}

/// Build the final dataset from a pool holding all three bases. Every
/// identity with base-1 rows gets exactly `k` rows: `k - replace` retained
/// base-1 images and `replace` pose images.
pub fn assemble(pool: &DatasetManifest, cfg: &AssembleConfig, seed: u64) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut by_id: BTreeMap<u64, [Vec<&ManifestRow>; 3]> = BTreeMap::new();
    for r in pool.rows() {
        let slot = Stage::ALL.iter().position(|s| *s == r.stage).unwrap();
        by_id.entry(r.identity_id).or_default()[slot].push(r);
    }
    let mut out = Vec::with_capacity(by_id.len() * cfg.k);
    for (&id, [base, attr, lora]) in &by_id {
        if base.is_empty() {
            continue;
        }
        let keep = cfg.k - cfg.replace;
        if base.len() < cfg.k {
            return Err(Error::InsufficientSupply {
                identity: id,
                detail: format!("{} base-1 images, need {}", base.len(), cfg.k),
            });
        }
        let mut n_attr = cfg.attrop_share.min(attr.len());
        let n_lora = (cfg.replace - n_attr).min(lora.len());
        n_attr += (cfg.replace - n_attr - n_lora).min(attr.len() - n_attr);
        if n_attr + n_lora < cfg.replace {
            return Err(Error::InsufficientSupply {
                identity: id,
                detail: format!(
                    "{} pose images available, need {}",
                    attr.len() + lora.len(),
                    cfg.replace
                ),
            });
        }
        let mut r = rng::stream(seed, "assemble", id);
        out.extend(pick(base, keep, &mut r));
        out.extend(pick(attr, n_attr, &mut r));
        out.extend(pick(lora, n_lora, &mut r));
    }
    DatasetManifest::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(ids: u64, per: [u64; 3]) -> DatasetManifest {
        let mut rows = Vec::new();
        for id in 0..ids {
            let mut image = 0;
            for (s, n) in Stage::ALL.iter().zip(per) {
                for j in 0..n {
                    rows.push(ManifestRow {
                        identity_id: id,
                        image_id: image,
                        stage: *s,
                        sim_to_identity: 0.8,
                        quality: 21.0,
                        archive: format!("{s}.img"),
                        offset: id * 100 + j,
                    });
                    image += 1;
                }
            }
        }
        DatasetManifest::new(rows).unwrap()
    }

    #[test]
    fn default_split() {
        let m = assemble(&pool(3, [60, 22, 60]), &AssembleConfig::default(), 7).unwrap();
        assert_eq!(m.len(), 150);
        for (_, rows) in m.groups() {
            let count = |s| rows.iter().filter(|&&i| m.rows()[i].stage == s).count();
            assert_eq!(
                (count(Stage::Random), count(Stage::AttropPose), count(Stage::LoraPose)),
                (10, 20, 20)
            );
        }
    }

    #[test]
    fn no_replacement_is_a_base_subsample() {
        let cfg = AssembleConfig { k: 50, replace: 0, attrop_share: 0 };
        let m = assemble(&pool(2, [55, 0, 0]), &cfg, 1).unwrap();
        assert_eq!(m.len(), 100);
        assert!(m.rows().iter().all(|r| r.stage == Stage::Random));
    }

    #[test]
    fn seeded() {
        let p = pool(4, [70, 30, 30]);
        let cfg = AssembleConfig::default();
        assert_eq!(assemble(&p, &cfg, 3).unwrap(), assemble(&p, &cfg, 3).unwrap());
        assert_ne!(assemble(&p, &cfg, 3).unwrap(), assemble(&p, &cfg, 4).unwrap());
    }

    #[test]
    fn short_supply_names_identity() {
        match assemble(&pool(2, [60, 10, 10]), &AssembleConfig::default(), 0) {
            Err(Error::InsufficientSupply { identity: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        // a short attribute-search base is covered by the LoRA base
        let m = assemble(&pool(1, [50, 5, 40]), &AssembleConfig::default(), 0).unwrap();
        assert_eq!(m.count_by_stage(Stage::AttropPose), 5);
        assert_eq!(m.count_by_stage(Stage::LoraPose), 35);
    }
}
