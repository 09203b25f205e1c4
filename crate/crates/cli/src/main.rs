//! `latentmotion`: synthesize latent datasets, train the sequence GAN, sample,
//! transfer motion between identities, and evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "latentmotion", version, about = "Latent-trajectory video GAN toolkit")]
struct Cli {
    /// Shared JSON config with sections model, train, loss, eval, decoder.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Force sequential execution (results are identical either way).
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic sinusoidal latent dataset.
    Synth(SynthArgs),
    /// Train a generator/critic pair on a dataset.
    Train(TrainArgs),
    /// Roll out sequences from a generator checkpoint.
    Sample(SampleArgs),
    /// Move trajectories onto another identity with a motion-basis offset.
    Transfer(TransferArgs),
    /// Fit a motion basis by PCA over a dataset.
    Pca(PcaArgs),
    /// Compute FID, FVD or ACD and print the JSON report.
    Eval(EvalArgs),
    /// Render a sequence to PNG frames through a decoder adapter.
    Decode(DecodeArgs),
    /// Summarize a dataset, run directory, or archive file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Rank of the hidden motion signal.
    #[arg(long)]
    pub motion_dim: Option<usize>,
    #[arg(long)]
    pub sinusoids: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Repeat the first N frames for the whole dataset.
    #[arg(long)]
    pub motif: Option<usize>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, report.jsonl and manifest.json.
    #[arg(long)]
    pub run: PathBuf,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate for both networks.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training window length t.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub lambda_gp: Option<f64>,
    #[arg(long)]
    pub lambda_gap: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct SampleArgs {
    /// Generator checkpoint (ema.ckpt or raw.ckpt).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sequence length.
    #[arg(long, default_value_t = 250)]
    pub t: usize,
    #[arg(long, default_value_t = 128)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct TransferArgs {
    /// Sequence archive or dataset directory holding the source motion.
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Motion basis from `pca`.
    #[arg(long, requires = "code", conflicts_with = "offset")]
    pub basis: Option<PathBuf>,
    /// Target identity code w_new (archive, or JSON rows of numbers).
    #[arg(long, requires = "basis")]
    pub code: Option<PathBuf>,
    /// Use a precomputed offset instead of basis + code.
    #[arg(long, required_unless_present = "basis")]
    pub offset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the offset that was applied.
    #[arg(long)]
    pub save_offset: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct PcaArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = latentmotion::motion_transfer::DEFAULT_COMPONENTS)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Fid,
    Fvd,
    Acd,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Real dataset directory (FID and FVD).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generator checkpoint to sample from.
    #[arg(long, conflicts_with = "samples")]
    pub checkpoint: Option<PathBuf>,
    /// Sequence archive to evaluate instead of a checkpoint.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Frames (FID), clips (FVD) or sequences (ACD).
    #[arg(long)]
    pub n: Option<usize>,
    /// FVD clip length.
    #[arg(long)]
    pub clip: Option<usize>,
    /// ACD rollout length.
    #[arg(long)]
    pub len: Option<usize>,
    /// identity, temporal-mean, or random-projection-K.
    #[arg(long)]
    pub extractor: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct DecodeArgs {
    /// Sequence archive or dataset directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Which sequence of an archive to render.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Render at most this many frames.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct InspectArgs {
    pub path: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.sequential {
        latentmotion::parallel::set_enabled(false);
    }
    let result = config::Config::load(cli.config.as_deref()).and_then(|cfg| match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a, cfg),
        Command::Sample(a) => commands::sample(a, &cfg),
        Command::Transfer(a) => commands::transfer(a),
        Command::Pca(a) => commands::pca(a),
        Command::Eval(a) => commands::eval(a, &cfg),
        Command::Decode(a) => commands::decode(a, &cfg),
        Command::Inspect(a) => commands::inspect(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
