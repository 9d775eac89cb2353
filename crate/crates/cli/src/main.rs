//! `ssmcount`: synthesize datasets, train, infer and evaluate counting models.
//!
//! Exit status: 0 on success, 1 for user errors (bad flags, files or
//! configuration), 2 when an internal invariant is violated.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ssmcount", version, about = "Plant counting with multi-directional state-space scans")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    /// Root under which commands create default output directories.
    #[arg(long, global = true, env = "SSMCOUNT_OUT", default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dot-annotated dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Count plants in one image.
    Infer(InferArgs),
    /// Evaluate a checkpoint (or a baseline) on a dataset directory.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: <out-root>/synth].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of images.
    #[arg(long)]
    n: Option<usize>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Image width in pixels.
    #[arg(long)]
    width: Option<usize>,
    /// Image height in pixels.
    #[arg(long)]
    height: Option<usize>,
    /// Smallest number of blobs per image.
    #[arg(long)]
    count_min: Option<usize>,
    /// Largest number of blobs per image.
    #[arg(long)]
    count_max: Option<usize>,
    /// uniform, diagonal-band, anti-diagonal-band, row-band or column-band.
    #[arg(long)]
    placement: Option<String>,
    /// Band centre-line spacing in pixels.
    #[arg(long)]
    band_spacing: Option<f64>,
    /// Band half width in pixels.
    #[arg(long)]
    band_halfwidth: Option<f64>,
    /// Pixel-noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Minimum distance of dots from the border.
    #[arg(long)]
    margin: Option<f64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (images/, annotations.csv).
    #[arg(long)]
    data: PathBuf,
    /// Output directory [default: <out-root>/train].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Separate validation dataset; overrides --val-fraction.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Share of the training directory held out for validation.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// tiny, small or base.
    #[arg(long)]
    preset: Option<String>,
    /// Scan directions, e.g. `HVDA`, `H`, `D,A`.
    #[arg(long)]
    directions: Option<String>,
    /// one, two or four.
    #[arg(long)]
    grouping: Option<String>,
    /// Replace the softmax fusion by a plain mean.
    #[arg(long)]
    no_adaptive_fusion: bool,
    /// position or pooled.
    #[arg(long)]
    fusion_mode: Option<String>,
    /// Drop the convolutional local branch.
    #[arg(long)]
    no_cnn: bool,
    /// Weight of the local branch in the fused features.
    #[arg(long)]
    beta: Option<f64>,
    /// Count window size in pixels.
    #[arg(long)]
    r: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Number of passes over the training set.
    #[arg(long)]
    epochs: Option<usize>,
    /// Images per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for initialization, shuffling and crops.
    #[arg(long)]
    seed: Option<u64>,
    /// Random square training crop size.
    #[arg(long)]
    crop: Option<usize>,
    /// Weight of the window-level auxiliary L1 term.
    #[arg(long)]
    window_loss_weight: Option<f64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image to count.
    #[arg(long)]
    image: PathBuf,
    /// Refuse images whose sides are not multiples of 8 instead of padding.
    #[arg(long)]
    strict: bool,
    /// Resize to `WxH` before counting.
    #[arg(long, conflicts_with = "resize_ratio")]
    resize: Option<String>,
    /// Scale both sides by this ratio (rounded down to multiples of 8).
    #[arg(long)]
    resize_ratio: Option<f64>,
    /// Write the normalized count map to `<prefix>.txt` and `<prefix>.png`.
    #[arg(long)]
    emit_map: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate; optional with --oracle.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory (images/, annotations.csv).
    #[arg(long)]
    data: PathBuf,
    /// Output directory [default: <out-root>/eval].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Count from ground-truth window counts and the normalizer.
    #[arg(long, conflicts_with = "mean_baseline")]
    oracle: bool,
    /// Predict the training mean count (stored in the checkpoint) for every image.
    #[arg(long)]
    mean_baseline: bool,
    /// Window size for --oracle when no checkpoint is given.
    #[arg(long, default_value_t = 64)]
    r: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
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
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli.command, &cli.out_root) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e
                .chain()
                .filter_map(|c| c.downcast_ref::<ssmcount::Error>())
                .any(|c| c.is_internal());
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}
