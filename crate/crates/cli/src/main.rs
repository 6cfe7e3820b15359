use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use simsc_core::eval::{PckResult, ThresholdConvention};
use simsc_core::experiment::{self, ExperimentConfig};
use simsc_core::model::Model;
use simsc_core::synthdata::{self, Split, SynthConfig};
use simsc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "simsc", version, about = "Temperature-learned softmax matching on synthetic correspondence data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test dataset files.
    Gen(GenArgs),
    /// Train a model and write weights plus a per-epoch CSV log.
    Train(TrainArgs),
    /// Evaluate saved weights and print PCK as JSON.
    Eval(EvalArgs),
    /// Train one manual-temperature model per β and tabulate validation PCK.
    GridTemp(GridArgs),
    /// Log last-layer gradient magnitudes for the three reference configurations.
    GradAnalysis(GradArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    n_train: usize,
    #[arg(long, default_value_t = 64)]
    n_val: usize,
    #[arg(long, default_value_t = 64)]
    n_test: usize,
    /// Canvas side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// JSON generator settings; flags above override `size`.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.json and val.json.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for `weights/`, `train_log.csv` and `summary.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Dataset file, or a directory whose `--split` file is used.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.1, 0.15])]
    alphas: Vec<f64>,
    #[arg(long, default_value = "img")]
    convention: String,
    /// One value, or several to sweep.
    #[arg(long, value_delimiter = ',')]
    beta_eval: Vec<f64>,
    #[arg(long, default_value_t = 7.0)]
    sigma: f64,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.3, 0.1, 0.03, 0.01])]
    betas: Vec<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradArgs {
    /// Base config shared by all three runs.
    #[arg(long)]
    configs: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optimizer steps per configuration.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    beta_eval: f64,
    #[serde(flatten)]
    result: &'a PckResult,
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_val_pck_01: f64,
    final_beta_trn: f64,
    steps: usize,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("{flag} is required (flag or config field)")))
}

fn load_split(dir: &Path, split: Split) -> Result<Vec<synthdata::LoadedPair>> {
    let path = synthdata::split_path(dir, split);
    if !path.exists() {
        return Err(Error::Config(format!("dataset file {} not found", path.display())));
    }
    synthdata::load_dataset(&path)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<SynthConfig>(&std::fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("bad generator config: {e}")))?,
        None => SynthConfig::default(),
    };
    cfg.size = a.size;
    let paths = synthdata::generate_split(a.seed, a.n_train, a.n_val, a.n_test, &cfg, &a.out)?;
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let data = require(a.data.or(cfg.data.clone()), "--data")?;
    let out = require(a.out.or(cfg.out.clone()), "--out")?;
    let train = load_split(&data, Split::Train)?;
    let val = load_split(&data, Split::Val)?;
    std::fs::create_dir_all(&out)?;
    let outcome = experiment::train(&cfg, &train, &val, Some(&out.join("train_log.csv")), None)?;
    outcome.best.save(&out.join("weights"))?;
    experiment::write_json(
        &out.join("summary.json"),
        &TrainSummary {
            best_epoch: outcome.best_epoch,
            best_val_pck_01: outcome.best_pck,
            final_beta_trn: outcome.final_beta_trn,
            steps: outcome.steps,
        },
    )?;
    eprintln!(
        "best epoch {} val PCK@0.1 {:.4}, final beta_trn {:.5}",
        outcome.best_epoch, outcome.best_pck, outcome.final_beta_trn
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let convention: ThresholdConvention = a.convention.parse()?;
    let model = Model::load(&a.weights)?;
    let file = if a.data.is_dir() {
        let split = match a.split.as_str() {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(Error::Config(format!("unknown split {other:?}"))),
        };
        synthdata::split_path(&a.data, split)
    } else {
        a.data.clone()
    };
    let pairs = synthdata::load_dataset(&file)?;
    let betas = if a.beta_eval.is_empty() {
        let cfg = ExperimentConfig::default();
        vec![cfg.resolve_beta_eval(model.mode())?]
    } else {
        a.beta_eval.clone()
    };
    if betas.iter().any(|b| !(*b > 0.0)) || a.alphas.is_empty() || a.alphas.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::Config("beta_eval and alphas must be positive".into()));
    }
    if !(a.sigma > 0.0) {
        return Err(Error::Config("sigma must be positive".into()));
    }
    let results = experiment::evaluate_sweep(&model, &pairs, &betas, &a.alphas, a.sigma, convention)?;
    let reports: Vec<_> = results.iter().map(|(b, r)| EvalReport { beta_eval: *b, result: r }).collect();
    let text = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0])?
    } else {
        serde_json::to_string_pretty(&reports)?
    };
    match a.out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_grid(a: GridArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let train = load_split(&a.data, Split::Train)?;
    let val = load_split(&a.data, Split::Val)?;
    let rows = experiment::grid_temp(&cfg, &a.betas, &train, &val, experiment::thread_budget())?;
    experiment::write_grid_csv(&a.out, &rows)?;
    for r in &rows {
        if let Some(d) = &r.detail {
            eprintln!("beta {}: {d}", r.beta);
        }
    }
    Ok(())
}

fn cmd_grad(a: GradArgs) -> Result<()> {
    let mut cfg = load_config(a.configs.as_deref())?;
    if a.steps.is_some() {
        cfg.max_steps = a.steps;
    }
    let train = load_split(&a.data, Split::Train)?;
    let val = load_split(&a.data, Split::Val)?;
    let configs = experiment::grad_configs(&cfg);
    let rows = experiment::grad_analysis(&configs, &train, &val, experiment::thread_budget())?;
    experiment::write_grad_csv(&a.out, &rows)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GridTemp(a) => cmd_grid(a),
        Command::GradAnalysis(a) => cmd_grad(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
