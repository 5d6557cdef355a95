use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use synthid_core::attrop::{attrop, write_trace_csv, AttrOpConfig, Inference, ToyEvaluators};
use synthid_core::embedding::{OracleEmbedder, VectorStore};
use synthid_core::error::{Error, Result};
use synthid_core::generator::load_model;
use synthid_core::metrics::{kfold_accuracy, tpr_at_fpr, LabeledScore, ScoreSet};
use synthid_core::pipeline::{parse_stages, run_ablation, run_pipeline, run_stage, PipelineConfig, StageName};
use synthid_core::sampler::{perturb_store, sample_identities, PerturbationSpec, SamplerConfig};

const OUTPUT_ENV: &str = "SYNTHID_OUTPUT";

#[derive(Parser)]
#[command(name = "synthid", version, about = "Synthetic identity dataset pipeline")]
struct Cli {
    /// Pipeline configuration (TOML); the built-in toy config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `output_dir` from the config.
    #[arg(long, global = true, env = OUTPUT_ENV)]
    root: Option<PathBuf>,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw identity vectors. With --out, runs standalone.
    SampleIds(SampleArgs),
    /// Perturb identity vectors. With --out, runs standalone.
    Perturb(PerturbArgs),
    TrainGen,
    /// Identity images and attribute-searched images. With --out, runs
    /// standalone on one vector store.
    Attrop(AttrOpArgs),
    TrainPoseLora,
    GenPose,
    Assemble,
    Clean,
    LeakCheck(LeakArgs),
    Metrics,
    /// Verification on held-out probes, or on a score file with --scores.
    Verify(VerifyArgs),
    Report,
    /// Run several stages in order.
    Pipeline {
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Compare gated and ungated datasets on a finished run.
    Ablation,
    /// Print the built-in toy configuration.
    PrintConfig,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, requires = "out")]
    dim: Option<usize>,
    #[arg(long, requires = "out")]
    count: Option<usize>,
    #[arg(long, default_value_t = 0.3)]
    max_sim: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long, requires = "out")]
    ids: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttrOpArgs {
    #[arg(long, requires_all = ["ids", "input", "out"])]
    model: Option<PathBuf>,
    #[arg(long)]
    ids: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 22.5)]
    quality: f64,
    #[arg(long, default_value_t = 0.0)]
    pose: f64,
    #[arg(long, default_value_t = 30)]
    iters: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for one loss-trace CSV per vector.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct LeakArgs {
    /// Reference identity store to check against.
    #[arg(long)]
    refs: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Tab-separated `score<TAB>genuine` file; prints metrics as JSON.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 0.1)]
    fpr: f64,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::toy(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(r) = &cli.root {
        cfg.output_dir = r.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage(cli: &Cli, name: StageName, tweak: impl FnOnce(&mut PipelineConfig)) -> Result<()> {
    let mut cfg = load_config(cli)?;
    tweak(&mut cfg);
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    let rec = run_stage(name, &cfg, &root)?;
    for o in rec.outputs.keys() {
        println!("{}", root.join(o).display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SampleIds(a) => match &a.out {
            Some(out) => {
                let (Some(dim), Some(count)) = (a.dim, a.count) else {
                    return Err(Error::Config("standalone sample-ids needs --dim and --count".into()));
                };
                let cfg = SamplerConfig { dim, count, max_id_similarity: a.max_sim, seed: a.seed };
                cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
                sample_identities(&cfg)?.write(out)
            }
            None => stage(cli, StageName::SampleIds, |_| {}),
        },
        Command::Perturb(a) => match (&a.ids, &a.out) {
            (Some(ids), Some(out)) => {
                let spec = PerturbationSpec { per_identity: a.k, ..PerturbationSpec::default() };
                spec.validate().map_err(|e| Error::Config(e.to_string()))?;
                perturb_store(&VectorStore::read(ids)?, &spec, a.seed)?.write(out)
            }
            _ => stage(cli, StageName::Perturb, |_| {}),
        },
        Command::TrainGen => stage(cli, StageName::TrainGen, |_| {}),
        Command::Attrop(a) => match &a.model {
            Some(model) => attrop_standalone(cli, a, model),
            None => stage(cli, StageName::Attrop, |_| {}),
        },
        Command::TrainPoseLora => stage(cli, StageName::TrainPoseLora, |_| {}),
        Command::GenPose => stage(cli, StageName::GenPose, |_| {}),
        Command::Assemble => stage(cli, StageName::Assemble, |_| {}),
        Command::Clean => stage(cli, StageName::Clean, |_| {}),
        Command::LeakCheck(a) => stage(cli, StageName::LeakCheck, |cfg| {
            if let Some(r) = &a.refs {
                cfg.leak.references = Some(std::path::absolute(r).unwrap_or_else(|_| r.clone()));
                cfg.leak.canary = None;
            }
            if let Some(t) = a.threshold {
                cfg.leak.threshold = t;
                if cfg.leak.canary.is_some_and(|c| c <= t) {
                    cfg.leak.canary = None;
                }
            }
        }),
        Command::Metrics => stage(cli, StageName::Metrics, |_| {}),
        Command::Verify(a) => match &a.scores {
            Some(p) => verify_scores(p, a.folds, a.fpr),
            None => stage(cli, StageName::Verify, |_| {}),
        },
        Command::Report => stage(cli, StageName::Report, |_| {}),
        Command::Pipeline { stages } => {
            let cfg = load_config(cli)?;
            let list = parse_stages(stages)?;
            let root = cfg.output_dir.clone();
            for rec in run_pipeline(&list, &cfg, &root)? {
                println!("{}\t{} artifacts", rec.stage, rec.outputs.len());
            }
            Ok(())
        }
        Command::Ablation => {
            let cfg = load_config(cli)?;
            for o in run_ablation(&cfg, &cfg.output_dir)? {
                println!(
                    "seed {}\tgated {:.4}\tungated {:.4}",
                    o.seed, o.gated_accuracy, o.ungated_accuracy
                );
            }
            Ok(())
        }
        Command::PrintConfig => {
            print!("{}", PipelineConfig::toy().to_toml());
            Ok(())
        }
    }
}

fn attrop_standalone(cli: &Cli, a: &AttrOpArgs, model: &Path) -> Result<()> {
    let cfg = load_config(cli)?;
    let (Some(ids), Some(input), Some(out)) = (&a.ids, &a.input, &a.out) else {
        return Err(Error::Config("standalone attrop needs --ids, --in and --out".into()));
    };
    let mut search = AttrOpConfig::new(a.quality, a.pose, a.iters);
    search.step = cfg.attrop.step;
    search.validate().map_err(|e| Error::Config(e.to_string()))?;
    let (model, _) = load_model(model)?;
    let oracle = OracleEmbedder::new(cfg.oracle_config())?;
    let inf = Inference::new(&model, cfg.generator.inference_mask)?;
    let ev = ToyEvaluators { oracle: &oracle, image: cfg.image };
    let ids = VectorStore::read(ids)?;
    let vectors = VectorStore::read(input)?;
    let id_labels = ids.labels().map(<[String]>::to_vec).unwrap_or_else(|| (0..ids.len()).map(|i| i.to_string()).collect());
    let labels = vectors
        .labels()
        .ok_or_else(|| Error::Config("--in store needs identity labels".into()))?;
    let mut adjusted = VectorStore::new(vectors.dim());
    for (i, l) in labels.iter().enumerate() {
        let k = id_labels
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::Config(format!("no identity vector labelled {l:?}")))?;
        let o = attrop(&ids.embedding(k), &vectors.embedding(i), &inf, &ev, &search)?;
        if let Some(dir) = &a.trace {
            write_trace_csv(&dir.join(format!("trace-{i}.csv")), &o.trace)?;
        }
        adjusted.push_labelled(o.vector.values(), l.clone())?;
    }
    adjusted.write(out)
}

fn verify_scores(path: &Path, folds: usize, fpr: f64) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Format { path: path.to_path_buf(), detail: format!("line {}: expected score<TAB>0|1", n + 1) };
        let (s, g) = line.split_once('\t').ok_or_else(bad)?;
        let score: f64 = s.parse().map_err(|_| bad())?;
        let genuine = match g.trim() {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        };
        pairs.push(LabeledScore { score, genuine });
    }
    let set = ScoreSet {
        genuine: pairs.iter().filter(|p| p.genuine).map(|p| p.score).collect(),
        impostor: pairs.iter().filter(|p| !p.genuine).map(|p| p.score).collect(),
    };
    let out = serde_json::json!({
        "pairs": pairs.len(),
        "kfold": kfold_accuracy(&pairs, folds)?,
        "tpr": tpr_at_fpr(&set, fpr)?,
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(|e| Error::InvalidArgument(e.to_string()))?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
