//! `sage` — pipeline runner for the defense-selection engine.
//!
//! One stage per subcommand plus `run-all`; every run is driven by a JSON
//! config and a global seed, and writes artifacts plus a manifest into the
//! output directory. Errors print a single machine-readable JSON line on
//! stderr and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sage_core::pipeline::{configure_workers, Pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(
    name = "sage",
    about = "Per-sample dynamic defense selection pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for within-stage parallelism (0 = default).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest or generate data, preprocess, and split.
    Preprocess(RunArgs),
    /// Train the undefended baseline classifier.
    TrainBaseline(RunArgs),
    /// Generate the adversarial suite over the attack grid.
    Attack(RunArgs),
    /// Train the ten-entry defense portfolio.
    TrainDefenses(RunArgs),
    /// Build the performance matrix and optimal-defense labels.
    Matrix(RunArgs),
    /// Run active-learning label acquisition.
    Acquire(RunArgs),
    /// Fit the per-budget selectors.
    TrainSelector(RunArgs),
    /// Evaluate every policy under the configured protocol.
    Eval(RunArgs),
    /// Emit plot-ready CSV tables from the evaluation report.
    Report(RunArgs),
    /// Run every stage in dependency order.
    RunAll(RunArgs),
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        match self {
            Command::Preprocess(_) => Some(Stage::Preprocess),
            Command::TrainBaseline(_) => Some(Stage::TrainBaseline),
            Command::Attack(_) => Some(Stage::Attack),
            Command::TrainDefenses(_) => Some(Stage::TrainDefenses),
            Command::Matrix(_) => Some(Stage::Matrix),
            Command::Acquire(_) => Some(Stage::Acquire),
            Command::TrainSelector(_) => Some(Stage::TrainSelector),
            Command::Eval(_) => Some(Stage::Eval),
            Command::Report(_) => Some(Stage::Report),
            Command::RunAll(_) => None,
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Preprocess(a)
            | Command::TrainBaseline(a)
            | Command::Attack(a)
            | Command::TrainDefenses(a)
            | Command::Matrix(a)
            | Command::Acquire(a)
            | Command::TrainSelector(a)
            | Command::Eval(a)
            | Command::Report(a)
            | Command::RunAll(a) => a,
        }
    }
}

fn run(cli: &Cli) -> Result<(), String> {
    let args = cli.command.args();
    let mut cfg = PipelineConfig::load(&args.config).map_err(|e| e.to_string())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.to_string_lossy().to_string();
    }
    configure_workers(args.workers);
    let mut pipeline = Pipeline::new(cfg).map_err(|e| e.to_string())?;
    match cli.command.stage() {
        Some(stage) => {
            let ran = pipeline.run_stage(stage).map_err(|e| e.to_string())?;
            eprintln!(
                "stage {} {}",
                stage.name(),
                if ran { "completed" } else { "up to date" }
            );
        }
        None => {
            pipeline.run_all().map_err(|e| e.to_string())?;
            eprintln!("run-all completed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            let line = serde_json::json!({ "error": message });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
