use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attrop::YAW_TARGETS;
use crate::dataset::{AssembleConfig, DbscanConfig, Gate, GateConfig, LEAK_THRESHOLD};
use crate::embedding::{OracleConfig, NORM_HI, NORM_LO};
use crate::error::{Error, Result};
use crate::generator::toy::{ToyDatasetConfig, ToyWorldConfig};
use crate::generator::{GeneratorConfig, ImageShape, LossWeights, MaskConfig, TrainConfig, DECODER_STAGES};
use crate::io::sha256_hex;
use crate::lora::{LoraConfig, ENCODER_STAGES};
use crate::rng;
use crate::sampler::{PerturbationSpec, SamplerConfig, SigmaShare};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub dim: usize,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub contrast: f64,
    pub pose_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitySection {
    /// Identities in the final dataset.
    pub count: usize,
    /// Identity vectors drawn before the identity-image gate.
    pub candidates: usize,
    /// Reference identities for the leakage check, drawn jointly with the
    /// candidates so they obey the same separation constraint.
    pub references: usize,
    pub max_similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSection {
    /// Candidate perturbed vectors per identity for the random base.
    pub per_identity: usize,
    pub mixture: Vec<SigmaShare>,
    pub min_similarity_to_identity: f64,
    pub norm_lo: f64,
    pub norm_hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    #[serde(default)]
    pub weights: LossWeights,
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64, workers: usize) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            weights: self.weights,
            seed,
            workers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDataSection {
    pub identities: usize,
    pub per_identity: usize,
    pub intra_std: f64,
    pub pose_range: f64,
}

impl ToyDataSection {
    pub fn to_dataset_config(&self, seed: u64) -> ToyDatasetConfig {
        ToyDatasetConfig {
            identities: self.identities,
            per_identity: self.per_identity,
            intra_std: self.intra_std,
            pose_range: self.pose_range,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub hidden: usize,
    pub tokens: usize,
    pub channels: usize,
    pub blocks: usize,
    pub decoder_channels: [usize; DECODER_STAGES - 1],
    pub input_scale: f64,
    pub mask: MaskConfig,
    /// Fraction of leading token rows replaced by the condition at inference.
    pub inference_mask: f64,
    pub train: TrainSection,
    pub data: ToyDataSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttrOpSection {
    /// Target embedding magnitude.
    pub quality: f64,
    pub step: f64,
    /// Iterations for identity images and the random base.
    pub random_iterations: usize,
    /// Iterations for the pose base.
    pub pose_iterations: usize,
    /// Perturbed vectors per identity searched toward a yaw target.
    pub pose_per_identity: usize,
    pub pose_mixture: Vec<SigmaShare>,
    pub yaw_degrees: Vec<f64>,
    pub units_per_degree: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    pub init_std: f64,
    pub encoder_widths: [usize; ENCODER_STAGES - 1],
    pub train: TrainSection,
    /// Mask-ratio distribution during adapter training.
    pub train_mask: MaskConfig,
    pub data: ToyDataSection,
    /// Random-base images per identity whose features are rendered at each
    /// profile layout.
    pub candidates: usize,
    /// Leading-row mask used when rendering.
    pub mask: f64,
}

impl LoraSection {
    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
            init_std: self.init_std,
            encoder_widths: self.encoder_widths,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakSection {
    pub threshold: f64,
    /// When set, one extra image whose embedding sits at roughly this cosine
    /// to a reference identity is added before the check, which must drop it.
    #[serde(default)]
    pub canary: Option<f64>,
    /// Reference store to check against instead of the sampled references.
    #[serde(default)]
    pub references: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Held-out probe images per identity.
    pub probes_per_identity: usize,
    pub mixture: Vec<SigmaShare>,
    pub folds: usize,
    pub fpr: f64,
}

/// Gated-versus-ungated comparison built on a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    /// Candidate images per identity.
    pub pool: usize,
    pub pool_mixture: Vec<SigmaShare>,
    /// Similarity floor for both pool and probe perturbations.
    pub min_similarity: f64,
    /// Images per identity in each dataset.
    pub keep: usize,
    pub probes: usize,
    pub probe_mixture: Vec<SigmaShare>,
    pub seeds: usize,
}

/// Everything one pipeline run depends on. All randomness derives from
/// `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub workers: usize,
    pub oracle: OracleSection,
    pub image: ImageShape,
    pub world: WorldSection,
    pub identities: IdentitySection,
    pub perturbation: PerturbationSection,
    pub generator: GeneratorSection,
    pub attrop: AttrOpSection,
    pub lora: LoraSection,
    pub gates: GateConfig,
    pub assemble: AssembleConfig,
    pub dbscan: DbscanConfig,
    pub leak: LeakSection,
    pub verify: VerifySection,
    pub ablation: AblationSection,
}

fn one() -> usize {
    1
}

fn share(sigma: f64, fraction: f64) -> SigmaShare {
    SigmaShare { sigma, fraction }
}

impl PipelineConfig {
    /// Desk-scale defaults: 100 identities of 50 images in a 96-d space.
    pub fn toy() -> Self {
        PipelineConfig {
            seed: 2024,
            output_dir: PathBuf::from("runs/toy"),
            workers: 1,
            oracle: OracleSection { dim: 96, gain: 2.65 },
            image: ImageShape::new(16, 16, 1),
            world: WorldSection { contrast: 1.0, pose_gain: 1.5 },
            identities: IdentitySection { count: 100, candidates: 110, references: 50, max_similarity: 0.3 },
            perturbation: PerturbationSection {
                per_identity: 60,
                mixture: vec![share(0.3, 0.4), share(0.5, 0.4), share(0.7, 0.2)],
                min_similarity_to_identity: 0.5,
                norm_lo: NORM_LO,
                norm_hi: NORM_HI,
            },
            generator: GeneratorSection {
                hidden: 96,
                tokens: 8,
                channels: 96,
                blocks: 2,
                decoder_channels: [64, 32, 16],
                input_scale: 8.0 / 21.0,
                mask: MaskConfig::default(),
                inference_mask: 1.0,
                train: TrainSection { steps: 1500, lr: 5e-3, batch: 16, weights: LossWeights::default() },
                data: ToyDataSection { identities: 512, per_identity: 8, intra_std: 0.35, pose_range: 1.0 },
            },
            attrop: AttrOpSection {
                quality: 24.5,
                step: 0.3,
                random_iterations: 3,
                pose_iterations: 10,
                pose_per_identity: 24,
                pose_mixture: vec![share(0.3, 0.5), share(0.5, 0.5)],
                yaw_degrees: YAW_TARGETS.to_vec(),
                units_per_degree: 1.0 / 16.0,
            },
            lora: LoraSection {
                rank: 4,
                alpha: 8.0,
                init_std: 0.1,
                encoder_widths: [8, 16, 32],
                train: TrainSection { steps: 1000, lr: 5e-3, batch: 8, weights: LossWeights::default() },
                train_mask: MaskConfig::default(),
                data: ToyDataSection { identities: 128, per_identity: 4, intra_std: 0.35, pose_range: 1.0 },
                candidates: 30,
                mask: 0.25,
            },
            gates: GateConfig {
                identity: Gate { min_sim: 0.9, min_quality: 23.31 },
                perturbation: Gate { min_sim: 0.7, min_quality: 23.15 },
            },
            assemble: AssembleConfig::default(),
            dbscan: DbscanConfig::default(),
            leak: LeakSection { threshold: LEAK_THRESHOLD, canary: Some(0.6), references: None },
            verify: VerifySection {
                probes_per_identity: 10,
                mixture: vec![share(0.5, 1.0)],
                folds: 10,
                fpr: 0.1,
            },
            ablation: AblationSection {
                pool: 40,
                pool_mixture: vec![share(0.5, 0.5), share(2.5, 0.5)],
                min_similarity: 0.0,
                keep: 5,
                probes: 10,
                probe_mixture: vec![share(2.5, 1.0)],
                seeds: 5,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical serialization; independent of comments and
    /// key order in the source file.
    /// SHA-256 of the serialized config with `output_dir` cleared, so a run
    /// moved to another directory keeps its hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(c.to_toml().as_bytes())
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        rng::derive_seed(self.seed, label, 0)
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            dim_in: self.image.numel(),
            channels: self.image.channels,
            dim_out: self.oracle.dim,
            gain: self.oracle.gain,
            seed: self.seed_for("oracle"),
        }
    }

    pub fn world_config(&self) -> ToyWorldConfig {
        ToyWorldConfig {
            image: self.image,
            contrast: self.world.contrast,
            pose_gain: self.world.pose_gain,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let g = &self.generator;
        GeneratorConfig {
            dim: self.oracle.dim,
            hidden: g.hidden,
            tokens: g.tokens,
            channels: g.channels,
            blocks: g.blocks,
            decoder_channels: g.decoder_channels,
            image: self.image,
            input_scale: g.input_scale,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            dim: self.oracle.dim,
            count: self.identities.candidates + self.identities.references,
            max_id_similarity: self.identities.max_similarity,
            seed: self.seed_for("sample-ids"),
        }
    }

    fn spec(&self, per_identity: usize, mixture: &[SigmaShare]) -> PerturbationSpec {
        let p = &self.perturbation;
        PerturbationSpec {
            per_identity,
            mixture: mixture.to_vec(),
            min_similarity_to_identity: p.min_similarity_to_identity,
            norm_lo: p.norm_lo,
            norm_hi: p.norm_hi,
            norm_target: None,
        }
    }

    pub fn ablation_specs(&self) -> (PerturbationSpec, PerturbationSpec) {
        let a = &self.ablation;
        let mut pool = self.spec(a.pool, &a.pool_mixture);
        pool.min_similarity_to_identity = a.min_similarity;
        let mut probes = self.spec(a.probes, &a.probe_mixture);
        probes.min_similarity_to_identity = a.min_similarity;
        (pool, probes)
    }

    pub fn random_spec(&self) -> PerturbationSpec {
        self.spec(self.perturbation.per_identity, &self.perturbation.mixture)
    }

    pub fn pose_spec(&self) -> PerturbationSpec {
        self.spec(self.attrop.pose_per_identity, &self.attrop.pose_mixture)
    }

    pub fn probe_spec(&self) -> PerturbationSpec {
        self.spec(self.verify.probes_per_identity, &self.verify.mixture)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let wrap = |r: Result<()>, what: &str| r.map_err(|e| Error::Config(format!("{what}: {e}")));
        if self.workers == 0 {
            return cfg("workers must be at least 1".into());
        }
        if self.oracle.dim == 0 || !(self.oracle.gain > 0.0 && self.oracle.gain.is_finite()) {
            return cfg("oracle.dim and oracle.gain must be positive".into());
        }
        let ids = &self.identities;
        if ids.count == 0 || ids.candidates < ids.count {
            return cfg("identities: need 0 < count <= candidates".into());
        }
        if !(ids.max_similarity > -1.0 && ids.max_similarity < 1.0) {
            return cfg("identities.max_similarity must lie in (-1, 1)".into());
        }
        wrap(self.sampler_config().validate(), "identities")?;
        wrap(self.generator_config().validate(), "generator")?;
        wrap(self.generator.mask.validate(), "generator.mask")?;
        wrap(self.lora.train_mask.validate(), "lora.train_mask")?;
        if !(0.0..=1.0).contains(&self.generator.inference_mask) || !(0.0..=1.0).contains(&self.lora.mask) {
            return cfg("mask ratios must lie in [0, 1]".into());
        }
        for (t, what) in [(&self.generator.train, "generator.train"), (&self.lora.train, "lora.train")] {
            wrap(t.to_train_config(0, self.workers).validate(), what)?;
        }
        for spec in [self.random_spec(), self.pose_spec(), self.probe_spec()] {
            wrap(spec.validate(), "perturbation")?;
        }
        if self.perturbation.per_identity < self.assemble.k - self.assemble.replace {
            return cfg("perturbation.per_identity is below the retained base-1 count".into());
        }
        let a = &self.attrop;
        if !(a.quality.is_finite() && a.step > 0.0 && a.units_per_degree > 0.0) {
            return cfg("attrop: quality, step and units_per_degree must be positive".into());
        }
        if a.random_iterations == 0 || a.pose_iterations == 0 || a.random_iterations > 30 || a.pose_iterations > 30 {
            return cfg("attrop iterations must lie in 1..=30".into());
        }
        if a.yaw_degrees.is_empty() || a.yaw_degrees.iter().any(|y| !(0.0..=90.0).contains(y)) {
            return cfg("attrop.yaw_degrees must be non-empty and within [0, 90]".into());
        }
        if self.lora.rank == 0 || !(self.lora.alpha > 0.0) || self.lora.candidates == 0 {
            return cfg("lora: rank, alpha and candidates must be positive".into());
        }
        wrap(self.gates.validate(), "gates")?;
        wrap(self.assemble.validate(), "assemble")?;
        wrap(self.dbscan.validate(), "dbscan")?;
        if !(-1.0..=1.0).contains(&self.leak.threshold) {
            return cfg("leak.threshold must lie in [-1, 1]".into());
        }
        if let Some(c) = self.leak.canary {
            if !(c > self.leak.threshold && c < 1.0) {
                return cfg("leak.canary must lie in (threshold, 1)".into());
            }
            if ids.references == 0 {
                return cfg("leak.canary needs reference identities".into());
            }
        }
        let v = &self.verify;
        if v.probes_per_identity < 2 || v.folds < 2 || !(v.fpr > 0.0 && v.fpr < 1.0) {
            return cfg("verify: need probes_per_identity >= 2, folds >= 2 and 0 < fpr < 1".into());
        }
        let a = &self.ablation;
        if a.keep == 0 || a.pool < a.keep || a.seeds == 0 {
            return cfg("ablation: need 0 < keep <= pool and seeds >= 1".into());
        }
        let (pool, probes) = self.ablation_specs();
        wrap(pool.validate(), "ablation pool")?;
        wrap(probes.validate(), "ablation probes")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_round_trips() {
        let c = PipelineConfig::toy();
        c.validate().unwrap();
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_named() {
        let text = PipelineConfig::toy().to_toml().replace("[dbscan]\n", "[dbscan]\nradius = 3\n");
        match PipelineConfig::from_toml(&text) {
            Err(Error::Config(m)) => assert!(m.contains("radius"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_threshold_rejected() {
        let mut c = PipelineConfig::toy();
        c.gates.perturbation.min_sim = 0.95;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::toy();
        c.leak.canary = Some(0.3);
        assert!(c.validate().is_err());
    }
}
