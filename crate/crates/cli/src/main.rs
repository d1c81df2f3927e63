//! `gda`: generative domain adaptation experiments from the command line.
//!
//! Diagnostics go to stderr; each command prints one JSON summary line on
//! stdout. Exit codes: 0 success, 1 invalid usage or input, 2 runtime failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "gda", version, about = "Generative domain adaptation for face anti-spoofing")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (an image path for `specmix`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Generator learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub source_lr: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda_ent: Option<f64>,
    #[arg(long)]
    pub lambda_ph: Option<f64>,
    /// Drop the perceptual and phase terms.
    #[arg(long)]
    pub no_dsc: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Linear,
    Rbf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the configured synthetic domains, one directory each.
    GenData {
        /// Samples per class for every domain.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train F, H and R on labeled source data.
    TrainSource {
        /// Dataset directories; several are pooled.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Fit the generator on unlabeled target data against a frozen model.
    Adapt {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Score a labeled dataset and write HTER/AUC/ROC.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Mix the amplitude spectrum of one image with another's.
    Specmix {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        eta: Option<f64>,
        /// Fixed ratio instead of a draw from U[0, eta).
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// BN-statistic and feature MMD curves, raw and stylized.
    AnalyzeStats {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Target dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Source dataset for the MMD curve.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "rbf")]
        kernel: KernelArg,
        /// Also export pooled features of this block (1..=3).
        #[arg(long)]
        features_block: Option<usize>,
    },
    /// Baseline, NSC, NSC+DSC and full rows on one target domain.
    Ablate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Compare every backward rule with central differences.
    GradCheck {
        #[arg(long, default_value_t = gda_core::gradsuite::DEFAULT_TRIALS)]
        trials: usize,
        /// Append a check with a deliberately wrong rule.
        #[arg(long)]
        inject_fault: bool,
    },
}

fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(&cli.common, cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    std::process::exit(run(std::env::args().collect()));
}
