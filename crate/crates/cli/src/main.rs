//! `amd`: train, evaluate and inspect the forecaster from the command line.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use amd_core::AmdError;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "amd", version, about = "Multi-scale decomposition forecaster")]
struct Cli {
    /// Worker threads for data loading and theorem-check trials (falls back to AMD_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// How to read a CSV file.
#[derive(Debug, Clone, Args)]
pub struct CsvOpts {
    /// The first row holds values, not column names.
    #[arg(long)]
    pub no_header: bool,

    /// Zero-based column holding timestamps; it is carried along but not modelled.
    #[arg(long)]
    pub date_column: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and optionally write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        csv: CsvOpts,
    },
    /// Metrics of a checkpoint on a CSV, optionally truncated to shorter horizons.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Forecast steps to score; repeat for several. Defaults to the full horizon.
        #[arg(long)]
        horizon: Vec<usize>,
        #[arg(long, value_enum, default_value = "test")]
        partition: commands::PartitionArg,
        #[command(flatten)]
        csv: CsvOpts,
    },
    /// Forecast the rows following the last look-back window of a CSV.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        csv: CsvOpts,
    },
    /// Train the configured model and one variant, then compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// average, sparse, no-ddi, no-mdm, beta=<v> or lambda1=0
        #[arg(long)]
        mode: String,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        csv: CsvOpts,
    },
    /// Selector weights for every window and channel.
    Gates {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[command(flatten)]
        csv: CsvOpts,
    },
    /// Check the linear-predictor error bound on random smooth signals.
    TheoremCheck {
        #[arg(long, default_value_t = 24)]
        period: usize,
        #[arg(long, default_value_t = 96)]
        length: usize,
        #[arg(long, default_value_t = 48)]
        horizon: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        downsample_rate: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
    },
    /// Compare reverse-mode gradients with finite differences, per block.
    Gradcheck {
        /// Use the full toy model instead of a reduced one.
        #[arg(long)]
        full_model: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic series.
    Synth {
        #[arg(long, default_value = "sine")]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        length: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 24.0)]
        period: f64,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 0.0)]
        slope: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &AmdError) -> u8 {
    match e {
        AmdError::Config(_) | AmdError::Json(_) => 1,
        AmdError::Data(_)
        | AmdError::Parse { .. }
        | AmdError::Io { .. }
        | AmdError::Checkpoint(_)
        | AmdError::Shape(_) => 2,
        _ => 3,
    }
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("AMD_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("AMD_THREADS must be a positive integer, got {v:?}")),
        _ => Ok(None),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match threads(cli.threads) {
        Ok(Some(0)) => {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("thread pool already initialised: {e}");
            }
        }
        Ok(None) => {}
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
