//! `mrn` — command-line front end for the multi-region MR classifier.
//!
//! Subcommands: `synth` | `train` | `eval` | `ablate` | `gradcheck`.
//! Anything non-trivial lives in a TOML run configuration (`--config`);
//! command-line flags override the file. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use mrn_core::{MrnError, Result};

use crate::config::load_run_config;

#[derive(Parser)]
#[command(
    name = "mrn",
    version,
    about = "Multi-region MR classifier: synthesize paired datasets, train, evaluate, run the \
             region-masking study, and verify gradients"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired-modality dataset.
    Synth(SynthArgs),
    /// Run the two-stage training schedule.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Sweep region-masking patterns over a trained checkpoint.
    Ablate(AblateArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of patients to generate.
    #[arg(long)]
    patients: Option<usize>,
    /// Fraction of patients labeled PD.
    #[arg(long)]
    balance: Option<f64>,
    /// Class-signal multiplier; 0 removes every class difference.
    #[arg(long)]
    signal: Option<f64>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (holding manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, logs, and the config echo.
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs for the segmentation+contrastive stage.
    #[arg(long)]
    epochs_pretrain: Option<usize>,
    /// Epochs for the full-loss stage.
    #[arg(long)]
    epochs_finetune: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Held-out dataset directory evaluated during training (and by the
    /// fold ensemble when --folds is set).
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Train one model per stratified fold instead of a single run.
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory (holding manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional run directory for metrics.json and the config echo.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also decode masks and report hard Dice.
    #[arg(long)]
    seg: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory (holding manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate under each masking pattern.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run directory for ablation.csv and the config echo.
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the probed random configurations.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Self-test hook: corrupt one analytic gradient and expect detection.
    #[arg(long, hide = true)]
    corrupt: bool,
}

fn exit_code(err: &MrnError) -> u8 {
    match err {
        MrnError::Config(_) => 1,
        MrnError::Shape(_) | MrnError::Data(_) | MrnError::Io { .. } => 2,
        MrnError::Numeric(_) => 3,
    }
}

/// MRN_NUM_WORKERS caps loader/evaluation parallelism (rayon's global pool).
fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var("MRN_NUM_WORKERS") else {
        return Ok(());
    };
    let workers: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            MrnError::Config(format!("MRN_NUM_WORKERS must be a positive integer, got {raw:?}"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| MrnError::Config(format!("worker pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_workers()?;
    match cli.cmd {
        Cmd::Synth(a) => {
            let mut run = load_run_config(a.config.as_deref())?;
            if let Some(v) = a.patients {
                run.synth.num_patients = v;
            }
            if let Some(v) = a.balance {
                run.synth.class_balance = v;
            }
            if let Some(v) = a.signal {
                run.synth.signal_strength = v;
            }
            if let Some(v) = a.seed {
                run.synth.seed = v;
            }
            commands::cmd_synth(&run, &a.out, a.force)
        }
        Cmd::Train(a) => {
            let mut run = load_run_config(a.config.as_deref())?;
            if let Some(v) = a.seed {
                run.train.seed = v;
            }
            if let Some(v) = a.epochs_pretrain {
                run.train.epochs_pretrain = v;
            }
            if let Some(v) = a.epochs_finetune {
                run.train.epochs_finetune = v;
            }
            if let Some(v) = a.batch_size {
                run.train.batch_size = v;
            }
            commands::cmd_train(&run, &a.data, &a.out, a.val_data.as_deref(), a.folds)
        }
        Cmd::Eval(a) => {
            let run = load_run_config(a.config.as_deref())?;
            commands::cmd_eval(&run, &a.data, &a.checkpoint, a.out.as_deref(), a.seg)
        }
        Cmd::Ablate(a) => {
            let run = load_run_config(a.config.as_deref())?;
            commands::cmd_ablate(&run, &a.data, &a.checkpoint, &a.out)
        }
        Cmd::Gradcheck(a) => commands::cmd_gradcheck(a.seed, a.corrupt),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
