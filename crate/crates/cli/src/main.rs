//! `svaclr`: generate the synthetic corpus, pre-train, and evaluate.

mod commands;
mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "svaclr", version, about = "Speed co-augmented audio-visual contrastive pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run config (JSON). Defaults to `config.json` in the data directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train.svac and test.svac.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Largest training speed the corpus must stay alias-free under.
        #[arg(long)]
        max_speed: Option<u32>,
    },
    /// Pre-train a model and write model.svck plus metrics.jsonl.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.svac.
        #[arg(long)]
        data: PathBuf,
        /// infonce_noaug, infonce_speed or soft_infonce.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        max_speed: Option<u32>,
        /// Add wall_time_ms to each metrics record.
        #[arg(long)]
        record_timing: bool,
    },
    /// Retrieval and linear probes; writes retrieval.csv and probe.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Linear probes only; writes probe.csv.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-class affinity under forced audio speeds; writes affinity.csv.
    Affinity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated speeds; defaults to 1..=max_speed.
        #[arg(long, value_delimiter = ',')]
        speeds: Option<Vec<u32>>,
        #[arg(long)]
        max_speed: Option<u32>,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        instances: usize,
    },
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SVACLR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("SVACLR_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Generate { common, max_speed } => commands::generate(&common, max_speed),
        Command::Pretrain {
            common,
            data,
            variant,
            max_speed,
            record_timing,
        } => commands::pretrain(&common, &data, variant.as_deref(), max_speed, record_timing),
        Command::Eval {
            common,
            data,
            checkpoint,
        } => commands::eval(&common, &data, &checkpoint, true),
        Command::Probe {
            common,
            data,
            checkpoint,
        } => commands::eval(&common, &data, &checkpoint, false),
        Command::Affinity {
            common,
            data,
            checkpoint,
            speeds,
            max_speed,
        } => commands::affinity(&common, &data, &checkpoint, speeds, max_speed),
        Command::Gradcheck { seed, instances } => commands::gradcheck(seed, instances),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
