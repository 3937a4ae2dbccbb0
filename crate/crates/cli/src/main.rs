//! `texrecnet`: data generation, training, inference, evaluation and
//! texture-entropy reports.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status for mistakes in arguments, configs or input files.
const USER_ERROR: u8 = 1;
/// Exit status for failures that are not the caller's fault.
const INTERNAL_ERROR: u8 = 2;

/// Overrides the default run root (`runs`) of `train`.
pub const RUN_ROOT_ENV: &str = "TEXREC_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "texrecnet", version, about = "Low-contrast scratch segmentation with recursive denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scratch dataset with manifests.
    GenerateData(GenerateArgs),
    /// Train a denoiser on a generated dataset.
    Train(TrainArgs),
    /// Segment images with a trained checkpoint.
    Infer(InferArgs),
    /// Score predictions or a checkpoint against labeled data.
    Eval(EvalArgs),
    /// Texture-entropy series and consistency feature of a mask archive.
    Texent(TexentArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `default` (256x256, 1082/2240/154/154 split) or `smoke` (64x64, 16 samples).
    #[arg(long, default_value = "default")]
    pub preset: String,
    /// Generator settings (TOML) applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub labeled: Option<usize>,
    #[arg(long)]
    pub unlabeled: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `generate-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training settings (TOML), or a `run_config.toml` from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Step subsequence length.
    #[arg(long)]
    pub m: Option<usize>,
    /// Trajectories per unlabeled image.
    #[arg(long)]
    pub n: Option<usize>,
    /// Skip unlabeled data entirely.
    #[arg(long)]
    pub supervised_only: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Directory that receives the run directory.
    #[arg(long)]
    pub run_root: Option<PathBuf>,
    /// Continue an interrupted run directory instead of starting a new one.
    #[arg(long, conflicts_with_all = ["config", "seed", "m", "n", "supervised_only", "epochs", "lr"])]
    pub resume: Option<PathBuf>,
    /// Parameter precision: f32 or f64.
    #[arg(long, default_value = "f32")]
    pub precision: String,
}

#[derive(Args, Debug)]
pub struct WindowArgs {
    /// Tile side; defaults to the largest square that fits.
    #[arg(long)]
    pub window: Option<usize>,
    /// Tile stride; defaults to the window.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Reverse steps per tile; defaults to the checkpoint's evaluation setting.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability threshold; defaults to the checkpoint's tau_m.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Checkpoint directory (or a run directory).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A PNG image or a dataset manifest (`.jsonl`).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Also write each tile's prior-estimate sequence as a mask archive.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Labeled dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Score masks written by `infer` (`<stem>_mask.png`) ...
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// ... or run a checkpoint first.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Args, Debug)]
pub struct TexentArgs {
    /// Archive directory containing `manifest.tsv`.
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub tau_m: f64,
    /// Side of the pattern window.
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long, default_value_t = 9)]
    pub tau_f: usize,
    /// Write the report as JSON here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Marks an error as the caller's fault.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let user = err
        .chain()
        .any(|e| e.is::<UserError>() || e.is::<texrec::error::Error>() || e.is::<std::io::Error>());
    if user {
        USER_ERROR
    } else {
        INTERNAL_ERROR
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USER_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    std::panic::set_hook(Box::new(|info| {
        let msg = info
            .payload()
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| info.payload().downcast_ref::<String>().cloned())
            .unwrap_or_default();
        eprintln!("internal error: {}", msg.replace('\n', " "));
    }));
    let result = std::panic::catch_unwind(|| match cli.command {
        Command::GenerateData(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Texent(a) => commands::texent(a),
    });
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            let msg = e.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ");
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(INTERNAL_ERROR),
    }
}
