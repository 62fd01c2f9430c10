//! `bivsr`: synthesize toy data, train, upscale and evaluate.
//!
//! Exit codes: 0 on success, 1 for runtime failures, 2 for usage errors
//! (bad flags, missing input paths).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bivsr", version, about = "Toy reference-guided video super-resolution")]
struct Cli {
    /// TOML run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed, overriding the config file.
    #[arg(long, global = true)]
    root_seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic ground-truth videos, their degraded inputs and flows.
    SynthData(SynthArgs),
    /// Create an untrained model checkpoint.
    Init(InitArgs),
    /// Run one training stage and write the updated checkpoint.
    Train(TrainArgs),
    /// Super-resolve a directory of low-quality frames.
    Upscale(UpscaleArgs),
    /// Compare predicted videos against ground truth.
    Eval(EvalArgs),
    /// Print the effective configuration as TOML.
    PrintConfig,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Vae,
    Base,
    Sr,
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReferenceArg {
    /// Ground-truth boundary frames.
    Gt,
    /// Degraded boundary frames, bicubically upscaled.
    Lq,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Dataset written by `synth-data` (its `train` directory or the root).
    /// Without it the videos are synthesized in memory from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to continue from; a fresh model is built when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override the stage's reference source.
    #[arg(long, value_enum)]
    reference: Option<ReferenceArg>,
    /// Override the stage's iteration count.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct UpscaleArgs {
    /// Model checkpoint.
    #[arg(long, required_unless_present = "frame_by_frame")]
    model: Option<PathBuf>,
    /// Directory of low-quality PNG frames.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// identity | oracle:<gt frame dir> | net:<sr checkpoint> | external:<command>
    #[arg(long, default_value = "identity")]
    enhancer: String,
    /// Upscale factor; defaults to the configured degradation factor.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long, conflicts_with = "unidirectional")]
    bidirectional: bool,
    #[arg(long)]
    unidirectional: bool,
    /// Latent tile side in cells; tiling is off when absent.
    #[arg(long)]
    tile_size: Option<usize>,
    #[arg(long, requires = "tile_size")]
    tile_overlap: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    sdedit_strength: Option<f64>,
    /// Sampler seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Split the input into overlapping clips sharing keyframes.
    #[arg(long)]
    long: bool,
    /// Decode with the decoder as it was before adapter fine-tuning.
    #[arg(long)]
    no_vae_adapter: bool,
    /// Skip diffusion and run the enhancer on every frame.
    #[arg(long, conflicts_with_all = ["long", "bidirectional", "unidirectional", "tile_size"])]
    frame_by_frame: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predicted frames, or a directory of per-video frame directories.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth in the same layout as `--pred`.
    #[arg(long)]
    gt: PathBuf,
    /// Flow files for the warping error, in the same layout.
    #[arg(long)]
    flows: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

/// Raised for problems with how the command was invoked.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
