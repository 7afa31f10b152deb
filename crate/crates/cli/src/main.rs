use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::CliError;

/// Multi-receptive-field segmentation toolkit.
///
/// Tables go to stdout; every machine-readable result is written to a file.
/// Exit status: 0 success, 1 invalid input, 2 failure during computation.
#[derive(Parser, Debug)]
#[command(name = "mrfseg", version)]
pub struct Cli {
    /// Seed for every random draw (data, initialization, sampling, augmentation)
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic multi-scale shapes dataset
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and metrics
    Train(TrainArgs),
    /// Two-stage lite training: dual path, prune, fine-tune with frozen normalization
    TrainLite(TrainLiteArgs),
    /// Evaluate a checkpoint at several input scales
    Eval(EvalArgs),
    /// Export the edge-aware loss weight map of a label image
    Ealmap(EalmapArgs),
    /// Print receptive fields of the configured layer paths
    Rf(RfArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Config file, [data] section [default: built-in scene settings]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples
    #[arg(long)]
    pub count: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file with [net], [train] and [eal] sections [default: built-in settings]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset directory; enables periodic evaluation and best.ckpt [default: none]
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory for model.ckpt and metrics.csv
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint's parameters; its config must match [default: fresh from --seed]
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainLiteArgs {
    /// Config file; [net] mrfm_mode must be lite [default: built-in settings with mrfm_mode = lite]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset directory [default: none]
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory for stage1.ckpt, model.ckpt, stage1.csv and stage2.csv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated input scales
    #[arg(long, default_value = "0.5,0.75,1,1.25,1.5,1.75,2")]
    pub scales: String,
    /// Boundary band half-width in pixels
    #[arg(long, default_value_t = 2)]
    pub band: usize,
    /// Per-scale CSV output
    #[arg(long, default_value = "eval.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EalmapArgs {
    /// Label image (binary PGM)
    #[arg(long)]
    pub labels: PathBuf,
    /// Number of classes
    #[arg(long)]
    pub classes: usize,
    /// Window size (odd, at least 3)
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Weight cap
    #[arg(long, default_value_t = 3)]
    pub m: u32,
    /// Label id excluded from edges and loss
    #[arg(long, default_value_t = 255)]
    pub ignore: u8,
    /// Output weight image (binary PGM, value = w·255/m)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RfArgs {
    /// Config file; [rf] paths plus the bottleneck path of [net] [default: built-in network only]
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
