//! `tnsde`: synthetic cohorts, nested-CV training, prediction, evaluation
//! and uplift reports from the command line.
//!
//! Exit codes: 0 success, 2 invalid input, 3 runtime failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "tnsde", version, about = "Causal neural-SDE trajectory pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a randomized cohort from the `[cohort]` section of a config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nested cross-validation: fold bundles, pooled predictions and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Factual and counterfactual predictions from trained fold models.
    Predict {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// `all`, `assigned`, or comma-separated arm names.
        #[arg(long)]
        arms: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Factual metric table and normalized-MSE curve.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Uplift terciles per arm and retention, plus ITE recovery when the
    /// dataset carries ground truth.
    Uplift {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Config supplying `[causal]` settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated retention levels.
        #[arg(long, value_delimiter = ',')]
        retentions: Option<Vec<f64>>,
    },
    /// Merge the JSON outputs of other commands into one summary file.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out } => commands::synth(&config, &out),
        Command::Train { config, data, out_dir } => commands::train(&config, &data, &out_dir),
        Command::Predict {
            run_dir,
            data,
            out_dir,
            arms,
            samples,
            seed,
        } => commands::predict(&commands::PredictArgs {
            run_dir,
            data,
            out_dir,
            arms,
            samples,
            seed,
        }),
        Command::Evaluate {
            predictions,
            data,
            out_dir,
        } => commands::evaluate(&predictions, &data, &out_dir),
        Command::Uplift {
            predictions,
            data,
            out_dir,
            config,
            retentions,
        } => commands::uplift(&predictions, &data, &out_dir, config.as_deref(), retentions),
        Command::Report { inputs, out } => commands::report(&inputs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
