//! `broker` command-line tool: synthesis, both training stages, evaluation,
//! single-pair fusion and counting, and diagnostic plots.

mod commands;
mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use broker_core::{Error, Result};
pub use commands::{oracle_density, GhostImageRow, GhostTable, GHOST_SCHEMA_VERSION};
pub use plot::{histogram, Histogram};

/// Environment variable naming a config file. When set it replaces `--config`.
pub const CONFIG_ENV: &str = "BROKER_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "broker", version, about = "Broker-modality RGB-T crowd counting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// RNG seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML or JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl Common {
    /// Config path after applying the environment override.
    pub fn config_path(&self) -> Option<PathBuf> {
        std::env::var_os(CONFIG_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.config.clone())
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// Base settings when no config file is given: `desk` or `paper`.
    #[arg(long, default_value = "desk")]
    pub profile: String,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset with point annotations.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// Maximum sensor offset in pixels.
        #[arg(long)]
        misalign: Option<f64>,
        #[arg(long)]
        illum: Option<f64>,
        /// Square image side.
        #[arg(long)]
        size: Option<usize>,
        /// `thermal` or `depth`.
        #[arg(long)]
        aux: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: distill a fusion teacher into the generator.
    Distill {
        #[arg(long)]
        data: Option<PathBuf>,
        /// `builtin` or `dir:PATH`.
        #[arg(long, default_value = "builtin")]
        teacher: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a generator checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: joint fine-tuning under the counting loss.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Distilled generator checkpoint.
        #[arg(long)]
        bmg: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_distill: bool,
        #[arg(long)]
        freeze_bmg: bool,
        #[arg(long)]
        no_cma: bool,
        #[arg(long)]
        no_broker: bool,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split and write a JSON report.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score annotation-derived densities instead of a model.
        #[arg(long)]
        oracle_density: bool,
        /// Skip generator timing.
        #[arg(long)]
        no_profile: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Fuse one RGB/auxiliary pair into a broker image.
    Fuse {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        aux: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print the predicted count for one pair.
    Count {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        aux: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Mean-intensity histograms of visible, broker and auxiliary images.
    Hist {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output directory for `hist.csv` (and `hist.png` with `--png`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        bins: usize,
        #[arg(long)]
        png: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Teacher vs broker vs reference fusion: triptychs and a PSNR/SSIM table.
    CompareGhost {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    commands::dispatch(cli.command)
}

/// One-line `CODE: message` rendering used on stderr.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("{}: {}", e.code(), msg)
}
