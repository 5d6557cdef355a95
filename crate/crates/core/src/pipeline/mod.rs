//! End-to-end dataset construction: configuration, stages that exchange
//! artifacts on disk, run records and the consolidated report.

mod config;
mod evaluate;
mod stages;

pub use config::{
    AblationSection, AttrOpSection, GeneratorSection, IdentitySection, LeakSection, LoraSection, OracleSection, PerturbationSection,
    PipelineConfig, ToyDataSection, TrainSection, VerifySection, WorldSection,
};
pub use evaluate::{
    attribute_csv, attribute_table, dataset_metrics, gating_ablation, run_ablation, nearest_centroid_verification, probe_features,
    AblationOutcome, DatasetMetrics, Report, VerificationReport,
};
pub use stages::{
    paths, vector_at_cosine, Canary, CleanSummary, DroppedRow, GateCounts, IdentitySummary, LeakSummary, PassCount,
    CANARY_IMAGE_ID, LORA_IMAGE_OFFSET, POSE_IMAGE_OFFSET,
};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sha256_file, write_atomic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageName {
    SampleIds,
    Perturb,
    TrainGen,
    Attrop,
    TrainPoseLora,
    GenPose,
    Assemble,
    Clean,
    LeakCheck,
    Metrics,
    Verify,
    Report,
}

impl StageName {
    /// Execution order.
    pub const ALL: [StageName; 12] = [
        StageName::SampleIds,
        StageName::Perturb,
        StageName::TrainGen,
        StageName::Attrop,
        StageName::TrainPoseLora,
        StageName::GenPose,
        StageName::Assemble,
        StageName::Clean,
        StageName::LeakCheck,
        StageName::Metrics,
        StageName::Verify,
        StageName::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StageName::SampleIds => "sample-ids",
            StageName::Perturb => "perturb",
            StageName::TrainGen => "train-gen",
            StageName::Attrop => "attrop",
            StageName::TrainPoseLora => "train-pose-lora",
            StageName::GenPose => "gen-pose",
            StageName::Assemble => "assemble",
            StageName::Clean => "clean",
            StageName::LeakCheck => "leak-check",
            StageName::Metrics => "metrics",
            StageName::Verify => "verify",
            StageName::Report => "report",
        }
    }

    /// Artifacts the stage reads under `cfg`; relative paths resolve
    /// against the run directory.
    pub fn inputs_for(&self, cfg: &PipelineConfig) -> Vec<String> {
        self.inputs()
            .iter()
            .map(|&p| match (&cfg.leak.references, p) {
                (Some(r), paths::REFERENCES) if *self == StageName::LeakCheck => r.to_string_lossy().into_owned(),
                _ => p.to_string(),
            })
            .collect()
    }

    /// Artifacts, relative to the run directory, the stage reads.
    pub fn inputs(&self) -> &'static [&'static str] {
        use paths::*;
        match self {
            StageName::SampleIds => &[],
            StageName::Perturb => &[CANDIDATES],
            StageName::TrainGen => &[],
            StageName::Attrop => &[CANDIDATES, PERTURB_RANDOM, PERTURB_POSE, GENERATOR],
            StageName::TrainPoseLora => &[GENERATOR],
            StageName::GenPose => &[POOL_RANDOM, RANDOM_IMG, IDENTITY_FEATURES, POSE_LORA],
            StageName::Assemble => &[POOL_RANDOM, POOL_ATTROP, POOL_LORA],
            StageName::Clean => &[ASSEMBLED, RANDOM_IMG, ATTROP_IMG, LORA_IMG],
            StageName::LeakCheck => &[CLEANED, REFERENCES, IDENTITY_FEATURES, GENERATOR, RANDOM_IMG, ATTROP_IMG, LORA_IMG],
            StageName::Metrics => &[MANIFEST, RANDOM_IMG, ATTROP_IMG, LORA_IMG],
            StageName::Verify => &[MANIFEST, PERTURB_PROBE, GENERATOR, RANDOM_IMG, ATTROP_IMG, LORA_IMG],
            StageName::Report => &[METRICS, VERIFY, LEAK, CLEAN, GATES, IDENTITY_SUMMARY],
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Parse `all` or a comma-separated stage list; the result is in execution
/// order.
pub fn parse_stages(spec: &str) -> Result<Vec<StageName>> {
    if spec.trim() == "all" {
        return Ok(StageName::ALL.to_vec());
    }
    let mut v = spec
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<Vec<StageName>>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

/// Provenance written beside every stage's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: StageName,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn record_path(root: &Path, stage: StageName) -> PathBuf {
    root.join("records").join(format!("{stage}.json"))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn hashes(root: &Path, rel: &[String]) -> Result<BTreeMap<String, String>> {
    rel.iter()
        .map(|r| Ok((r.clone(), sha256_file(&root.join(r))?)))
        .collect()
}

/// Run one stage against the run directory `root`, then write its record.
pub fn run_stage(stage: StageName, cfg: &PipelineConfig, root: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    let inputs = stage.inputs_for(cfg);
    for i in &inputs {
        let p = root.join(i);
        if !p.exists() {
            return Err(Error::Config(format!(
                "stage {stage}: missing input {} (run the producing stage first)",
                p.display()
            )));
        }
    }
    log::info!("stage {stage}: start");
    let outputs = stages::run(stage, cfg, root)?;
    let rec = RunRecord {
        stage,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        inputs: hashes(root, &inputs)?,
        outputs: hashes(root, &outputs)?,
    };
    write_json(&record_path(root, stage), &rec)?;
    log::info!("stage {stage}: wrote {} artifacts", rec.outputs.len());
    Ok(rec)
}

/// Run stages in order, stopping at the first failure.
pub fn run_pipeline(stages: &[StageName], cfg: &PipelineConfig, root: &Path) -> Result<Vec<RunRecord>> {
    let mut s = stages.to_vec();
    s.sort();
    s.iter().map(|&st| run_stage(st, cfg, root)).collect()
}
