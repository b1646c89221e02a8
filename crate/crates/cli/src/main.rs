//! Command-line front end: detect, train, eval-ground, eval-detect, bench,
//! synth. Exit codes: 0 success, 2 configuration/usage errors, 1 runtime
//! errors. All randomness flows from --seed.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "pcrd", version, about = "CPU LiDAR road-user detection pipeline")]
pub struct Cli {
    /// Pipeline configuration file (flat key = value text).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for batch scan processing. The bench headline always
    /// measures on a single thread.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Detect road users in velodyne .bin scans.
    Detect {
        /// Input scan files (KITTI velodyne binary).
        scans: Vec<PathBuf>,
        /// Write detection lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-scan PLY dumps (ground/cluster/detection colors).
        #[arg(long)]
        dump_ply: Option<PathBuf>,
        /// Directory for per-scan proposal dumps (text lines + point payload).
        #[arg(long)]
        dump_proposals: Option<PathBuf>,
    },
    /// Train both networks on the synthetic dataset; writes a checkpoint
    /// directory with weight archives, metadata and a ready-to-run config.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Energy-loss weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Checkpoint output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_id: usize,
        #[arg(long, default_value_t = 2000)]
        n_ood: usize,
        /// Train with the location-encoder input zeroed.
        #[arg(long)]
        no_pvle: bool,
    },
    /// Score ground segmentation against per-point label files.
    EvalGround {
        /// Scan files; each needs a matching .label next to it or under --labels.
        scans: Vec<PathBuf>,
        /// Label file (single scan) or directory of <stem>.label files.
        #[arg(long)]
        labels: PathBuf,
        /// Write the key = value report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-scan CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run detection and score AP against KITTI object labels.
    EvalDetect {
        scans: Vec<PathBuf>,
        /// Directory of <stem>.txt label files (or one file).
        #[arg(long)]
        labels: PathBuf,
        /// Directory of <stem>.txt calib files (or one file).
        #[arg(long)]
        calib: PathBuf,
        /// Interpolation: 11 or 40 recall points.
        #[arg(long, default_value_t = 40)]
        mode: u32,
        /// CSV output path (one row per class/difficulty).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Measure per-stage latency on a synthetic (default) or given scan.
    Bench {
        /// Optional velodyne .bin scan; default is a synthetic 64x2048 world.
        #[arg(long)]
        scan: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        /// Per-run CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate the synthetic proposal dataset into a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_id: usize,
        #[arg(long, default_value_t = 2000)]
        n_ood: usize,
    },
}

/// Errors that indicate a bad invocation or configuration (exit 2) rather
/// than a runtime failure (exit 1).
#[derive(Debug)]
pub enum AppError {
    Config(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for AppError {
    fn from(e: anyhow::Error) -> Self {
        AppError::Runtime(e)
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
