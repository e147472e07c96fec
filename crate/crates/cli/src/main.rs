//! `neko`: generate data, train, evaluate and inspect the task-routed MoE
//! corrector.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Precision, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] neko_core::NekoError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(neko_core::NekoError::Numerical(_)) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "neko", version, about = "Task-oriented mixture-of-experts error corrector")]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// One worker thread, ignoring NEKO_THREADS.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Floating-point precision of parameters and arithmetic.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-task dataset as JSON lines.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// `train` draws from the training pool, `eval` from the held-out pool.
        #[arg(long, value_enum, default_value = "train")]
        split: commands::Split,
    },
    /// Train a model; writes checkpoints, metrics.csv and config.toml to --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run on the same data.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps in this invocation.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Stop (and checkpoint) once this many seconds have elapsed.
        #[arg(long)]
        time_limit_secs: Option<f64>,
    },
    /// Corpus WER and BLEU of the model against the first hypothesis.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correct one n-best list read from stdin, one hypothesis per line.
    Correct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
    },
    /// Per-task expert selection statistics under inference routing.
    RouteStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the statistics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = RunConfig::load(cli.config.as_deref(), cli.seed, cli.precision, cli.deterministic)?;
    let threads = if config.deterministic {
        1
    } else {
        neko_core::corpus::worker_threads()
    };
    let ctx = commands::Context {
        config,
        precision_flag: cli.precision,
        threads,
    };
    match cli.command {
        Command::GenData { out, split } => commands::gen_data(&ctx, &out, split),
        Command::Train {
            data,
            out,
            resume,
            max_steps,
            time_limit_secs,
        } => commands::train(&ctx, &data, &out, resume.as_deref(), max_steps, time_limit_secs),
        Command::Eval { checkpoint, data, out } => commands::eval(&ctx, &checkpoint, &data, out.as_deref()),
        Command::Correct { checkpoint, task } => commands::correct(&ctx, &checkpoint, &task),
        Command::RouteStats { checkpoint, data, out } => commands::route_stats(&ctx, &checkpoint, &data, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
