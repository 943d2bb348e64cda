use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use exf_core::data::{load_dataset, save_dataset, DataFormat};
use exf_core::eval::{spectral_decay, RetrievalReport, SpectralReport};
use exf_core::gradcheck::{self, GradCheckOptions};
use exf_core::numcore::Exec;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{schema_json, ExperimentConfig, Overrides};
use crate::error::{CliError, CliResult};
use crate::experiment::{self, classify, EmbeddingKind};

pub const SOURCE_CHECKPOINT: &str = "source.ckpt";
pub const SOURCE_LOG: &str = "source_log.jsonl";
pub const SOURCE_REPORT: &str = "source_report.json";
pub const TRAIN_SPLIT: &str = "train.csv";
pub const TEST_SPLIT: &str = "test.csv";
pub const TARGET_CHECKPOINT: &str = "target.ckpt";
pub const TARGET_LOG: &str = "target_log.jsonl";
pub const TARGET_REPORT: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "exf", version, about = "Embedding transfer with relaxed contrastive loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a source model; write its checkpoint, log, recall report and the data splits.
    TrainSource(RunArgs),
    /// Train a target from a source checkpoint and write a full report.
    Transfer(TransferArgs),
    /// Print recall and spectral decay of a checkpoint on a dataset as JSON.
    Eval(EvalArgs),
    /// Compare every analytical gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the JSON Schema of experiment configs.
    Schema,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Serial reductions and time-free logs; pass `false` to disable.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Source checkpoint; defaults to the one in the output directory.
    #[arg(long)]
    pub source: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub k: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Test hook: perturb the named op's analytical gradient.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, deterministic: self.deterministic, out: self.out.clone() }
    }

    fn load(&self) -> CliResult<ExperimentConfig> {
        let cfg = ExperimentConfig::load(&self.config)?.apply(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs a parsed command, writing human-readable output to standard output.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::TrainSource(a) => train_source(&a),
        Command::Transfer(a) => transfer(&a),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Schema => {
            println!("{}", schema_json());
            Ok(())
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn out_dir(cfg: &ExperimentConfig) -> CliResult<&Path> {
    let dir = cfg.output.dir.as_path();
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn pretty(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

pub fn train_source(a: &RunArgs) -> CliResult<()> {
    let cfg = a.load()?;
    let splits = experiment::build_data(&cfg)?;
    let outcome = experiment::run_source(&cfg, &splits)?;
    let dir = out_dir(&cfg)?;
    let ckpt = Checkpoint::new(outcome.model, experiment::source_metadata(&cfg));
    write(&dir.join(SOURCE_CHECKPOINT), &ckpt.encode())?;
    write(&dir.join(SOURCE_LOG), outcome.log.to_jsonl(!cfg.deterministic).as_bytes())?;
    write(&dir.join(SOURCE_REPORT), pretty(&outcome.eval).as_bytes())?;
    for (file, ds) in [(TRAIN_SPLIT, &splits.train), (TEST_SPLIT, &splits.test)] {
        save_dataset(ds, &dir.join(file), DataFormat::Csv).map_err(CliError::runtime)?;
    }
    println!("source ({} embeddings)", outcome.eval.embedding.tag());
    println!("{}", experiment::recall_header(&cfg.eval.k_values));
    println!("{}", outcome.eval);
    println!("wrote {}", dir.join(SOURCE_CHECKPOINT).display());
    Ok(())
}

pub fn transfer(a: &TransferArgs) -> CliResult<()> {
    let cfg = a.run.load()?;
    if cfg.transfer.is_none() {
        return Err(CliError::Config(format!("{} has no `transfer` section", a.run.config.display())));
    }
    let source_path = a.source.clone().unwrap_or_else(|| cfg.output.dir.join(SOURCE_CHECKPOINT));
    if !source_path.exists() {
        return Err(CliError::Config(format!(
            "source checkpoint {} does not exist (run train-source first)",
            source_path.display()
        )));
    }
    let source = Checkpoint::load(&source_path).map_err(|e| CliError::Config(format!("{}: {e}", source_path.display())))?;
    experiment::check_source(&cfg, &source.model)?;
    let splits = experiment::build_data(&cfg)?;
    let t = cfg.transfer.as_ref().expect("checked above");
    let outcome = experiment::run_transfer(&cfg, &source.model, &splits)?;
    let dir = out_dir(&cfg)?;
    let ckpt = Checkpoint::new(outcome.model, experiment::target_metadata(&cfg, t));
    write(&dir.join(TARGET_CHECKPOINT), &ckpt.encode())?;
    write(&dir.join(TARGET_LOG), outcome.log.to_jsonl(!cfg.deterministic).as_bytes())?;
    write(&dir.join(TARGET_REPORT), pretty(&outcome.report).as_bytes())?;
    print!("{}", outcome.report);
    println!("wrote {}", dir.join(TARGET_REPORT).display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub embedding: EmbeddingKind,
    pub retrieval: RetrievalReport,
    pub spectral: SpectralReport,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).map_err(|e| CliError::Config(format!("{}: {e}", a.checkpoint.display())))?;
    if !a.dataset.exists() {
        return Err(CliError::Config(format!("dataset file {} does not exist", a.dataset.display())));
    }
    let ds = load_dataset(&a.dataset, DataFormat::from_path(&a.dataset)).map_err(classify)?;
    if ds.dim() != ckpt.model.input_dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {} features, {} has {}",
            ckpt.model.input_dim(),
            a.dataset.display(),
            ds.dim()
        )));
    }
    let kind = ckpt.meta_str("embedding").and_then(EmbeddingKind::from_tag).unwrap_or(EmbeddingKind::Raw);
    let e = kind.embed(&ckpt.model, &ds.features)?;
    let retrieval = experiment::recall(&e, &ds.labels, &a.k, Exec::Deterministic)?;
    let spectral = spectral_decay(&e).map_err(CliError::runtime)?;
    println!("{}", serde_json::to_string(&EvalOutput { embedding: kind, retrieval, spectral }).expect("serializes"));
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    if a.trials == 0 {
        return Err(CliError::Config("--trials must be at least 1".into()));
    }
    let opts = GradCheckOptions { seed: a.seed, trials: a.trials, corrupt: a.corrupt.clone() };
    let reports = gradcheck::run(&opts).map_err(CliError::config)?;
    println!("{:<28} {:>9} {:>14} {:>20}  result", "op", "instances", "max rel err", "worst seed");
    for r in &reports {
        println!(
            "{:<28} {:>9} {:>14.3e} {:>20}  {}",
            r.op,
            r.instances,
            r.max_rel_err,
            r.worst_seed,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    match reports.iter().find(|r| !r.passed) {
        Some(r) => Err(CliError::Verification(format!(
            "gradient check failed for {} (instance seed {}, relative error {:.3e})",
            r.op, r.worst_seed, r.max_rel_err
        ))),
        None => Ok(()),
    }
}
