mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use favae::Error;

use config::{BackboneArg, Fig1Score, ModeArg, Preset};

#[derive(Parser, Debug)]
#[command(name = "favae", version, about = "Feature-augmented VAE anomaly detection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    pub backbone: Option<BackboneArg>,
    /// Ablation m1..m6; overrides --mode.
    #[arg(long, global = true)]
    pub ablation: Option<String>,
    /// Pretrained backbone pack for `train`; trained model for other commands.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Dataset root (overrides `data.root`).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a toy dataset in the MVTec layout.
    Toygen {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        side: Option<usize>,
    },
    /// Train a model; writes weights and a loss CSV.
    Train,
    /// Score a test split; writes a score CSV and anomaly map PNGs.
    Score,
    /// Evaluate image and pixel AUROC; writes a JSON report.
    Eval,
    /// Histograms of normal, anomalous and shuffled toy samples.
    Fig1 {
        #[arg(long, value_enum)]
        score: Vec<Fig1Score>,
    },
    /// Render the anomaly map of one image.
    Render {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Gradient-based correction of one image.
    Correct {
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::NonFinite(_) | Error::DegenerateDensity | Error::NonScalarLoss(_) | Error::Shape { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
