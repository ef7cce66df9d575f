//! `bpdvc`: train, encode, decode, evaluate and sweep the codec.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
//! error. Outputs are written through a temporary file in the destination
//! directory and renamed into place, so a failed command leaves nothing
//! behind.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::List;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<bpdvc::Error> for Failure {
    fn from(e: bpdvc::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "bpdvc", version, about = "Bi-directional predictive neural video codec")]
pub struct Cli {
    /// `key=value` file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed; falls back to the config file, then BPDVC_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train every model bundle and both entropy models.
    Train(TrainArgs),
    /// Encode a video into a `.bpdv` bitstream.
    Encode(EncodeArgs),
    /// Decode a bitstream into a video.
    Decode(DecodeArgs),
    /// Rate and quality of a reconstruction against its reference.
    Eval(EvalArgs),
    /// Encode, decode and evaluate at several iteration counts.
    Rd(RdArgs),
    /// Write a synthetic clip with known motion.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Synthetic corpus preset (`default`).
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub synthetic: Option<String>,
    /// Training videos (`.y4m` files or PPM/PGM directories).
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Cumulative stage milestones, e.g. `2000,5000,10000`.
    #[arg(long)]
    pub steps: Option<List<usize>>,
    /// Start from the full-scale schedule instead of the desk-scale one.
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub halve_every: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
    /// Progressive iterations unrolled in stage 3.
    #[arg(long)]
    pub train_iters: Option<usize>,
    #[arg(long)]
    pub entropy_steps: Option<usize>,
    #[arg(long)]
    pub entropy_batch: Option<usize>,
    /// Autoencoder, prediction and flow loss weights, e.g. `1,1,0.1`.
    #[arg(long)]
    pub loss_weights: Option<List<f64>>,
    /// Number of synthetic clips.
    #[arg(long)]
    pub clips: Option<usize>,
    /// Synthetic frame size in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// JSON-lines training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CodecFlags {
    /// Progressive iterations for bi-predicted frames.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Progressive iterations for intra frames (defaults to `--iters`).
    #[arg(long)]
    pub intra_iters: Option<usize>,
    #[arg(long, value_parser = ["raw", "context"])]
    pub entropy: Option<String>,
    /// Use the approximated flows without refinement.
    #[arg(long)]
    pub no_flow_refine: bool,
    /// Predict with the mean of the warped references.
    #[arg(long)]
    pub no_bipred_net: bool,
    /// Context model without the neighboring-frame connection.
    #[arg(long)]
    pub no_temporal_skip: bool,
    #[arg(long)]
    pub gop_size: Option<usize>,
    #[arg(long)]
    pub flow_levels: Option<usize>,
    #[arg(long)]
    pub flow_iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub codec: CodecFlags,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    /// `.y4m` file or a directory for numbered PPM/PGM frames.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub decoded: PathBuf,
    #[arg(long)]
    pub bitstream: PathBuf,
    #[arg(long, default_value = "eval")]
    pub label: String,
    /// RD CSV with one point; a JSON mirror is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RdArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    /// Iteration counts to sweep, e.g. `1,2,4,8`.
    #[arg(long = "iters", value_name = "LIST")]
    pub sweep: List<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub codec: RdCodecFlags,
}

/// [`CodecFlags`] without `--iters`, which `rd` uses for the sweep.
#[derive(Args, Debug, Clone, Default)]
pub struct RdCodecFlags {
    #[arg(long)]
    pub intra_iters: Option<usize>,
    #[arg(long, value_parser = ["raw", "context"])]
    pub entropy: Option<String>,
    #[arg(long)]
    pub no_flow_refine: bool,
    #[arg(long)]
    pub no_bipred_net: bool,
    #[arg(long)]
    pub no_temporal_skip: bool,
    #[arg(long)]
    pub gop_size: Option<usize>,
    #[arg(long)]
    pub flow_levels: Option<usize>,
    #[arg(long)]
    pub flow_iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_parser = ["translation", "accelerating", "affine"], default_value = "accelerating")]
    pub motion: String,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
