mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Fits and evaluates sparse additive mechanism shift models of perturbation
/// data.
#[derive(Debug, Parser)]
#[command(name = "sams", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Name of the control perturbation.
    #[arg(long, global = true)]
    pub control: Option<String>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic dataset with known masks and embeddings.
    Simulate,
    /// Fit a model and write checkpoints and a metrics table.
    Train {
        /// Dataset directory (overrides `dataset`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from `last.bin` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset split and write `eval_report.json`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Importance-weighted particles.
        #[arg(long, short = 'K')]
        particles: Option<usize>,
        #[arg(long)]
        split: Option<String>,
        /// Also report treatment effects against the control.
        #[arg(long)]
        ate: bool,
        /// Perturbation to report an effect for; repeatable. Defaults to all.
        #[arg(long = "ate-target")]
        ate_targets: Vec<String>,
    },
    /// Simulate, fit and score masks over the sample-size and prior grid.
    RecoveryStudy,
    /// Write inferred masks and embedding means as CSV tables.
    ExportLatents {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureKind {
    Validation,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: FailureKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            kind: FailureKind::Validation,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            kind: FailureKind::Runtime,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            FailureKind::Validation => 1,
            FailureKind::Runtime => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<sams_core::Error> for CliError {
    fn from(e: sams_core::Error) -> Self {
        if e.is_validation() {
            CliError::validation(e.to_string())
        } else {
            CliError::runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SAMS_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate => commands::simulate(&cli.common),
        Command::Train { data, resume } => commands::train(&cli.common, data, resume),
        Command::Eval {
            checkpoint,
            data,
            particles,
            split,
            ate,
            ate_targets,
        } => commands::eval(
            &cli.common,
            commands::EvalArgs {
                checkpoint,
                data,
                particles,
                split,
                ate,
                ate_targets,
            },
        ),
        Command::RecoveryStudy => commands::recovery_study(&cli.common),
        Command::ExportLatents { checkpoint } => commands::export_latents(&cli.common, &checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
