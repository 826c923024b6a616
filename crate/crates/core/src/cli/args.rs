use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "fusiongan", version, about = "Identity/shape fusion GAN on procedural glyph sets")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset, one directory per identity set.
    GenData(GenDataArgs),
    /// Train generator and discriminator.
    Train(TrainArgs),
    /// Fuse images with a trained generator.
    Fuse(FuseArgs),
    /// Score a checkpoint (or a copy baseline) against the oracle.
    Eval(EvalArgs),
    /// Compare every backward rule with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 3)]
    pub sets: usize,
    #[arg(long, default_value_t = 200)]
    pub per_set: usize,
    #[arg(long, default_value_t = 32)]
    pub res: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Render held-out instances of the same identities instead of training ones.
    #[arg(long)]
    pub holdout: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root; synthetic sets are generated from the config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON file with any subset of the training config fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Held-out dataset scored every `--eval-every` iterations.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,

    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub pool_k: Option<usize>,
    #[arg(long)]
    pub lr_g: Option<f64>,
    #[arg(long)]
    pub lr_d: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub sets: Option<usize>,
    #[arg(long)]
    pub per_set: Option<usize>,
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long, overrides_with = "no_min_patch")]
    pub min_patch: bool,
    #[arg(long, overrides_with = "min_patch")]
    pub no_min_patch: bool,
    #[arg(long)]
    pub no_s1: bool,
    #[arg(long)]
    pub no_s2a: bool,
    #[arg(long)]
    pub no_s2b: bool,
    /// Generator maximises the fake-pair identity term as written.
    #[arg(long)]
    pub literal_max: bool,
    /// Stop gradients through the inner call of the cycle terms.
    #[arg(long)]
    pub stop_inner: bool,
    #[arg(long)]
    pub phase2_steps: Option<usize>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// First input (identity source).
    #[arg(long, conflicts_with = "x_dir")]
    pub x: Option<PathBuf>,
    /// Second input (shape source).
    #[arg(long, conflicts_with = "y_dir")]
    pub y: Option<PathBuf>,
    /// Batch of first inputs, fused with a fixed `--y`.
    #[arg(long)]
    pub x_dir: Option<PathBuf>,
    /// Batch of second inputs, fused with a fixed `--x`.
    #[arg(long)]
    pub y_dir: Option<PathBuf>,
    /// Output PNG for a single pair, or output directory in batch mode.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    CopyX,
    CopyY,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "baseline")]
    pub checkpoint: Option<PathBuf>,
    /// Score a copy baseline instead of a trained generator.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Dataset with `specs.json` records (typically a held-out set).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only check this op (snake_case name, e.g. conv2d).
    #[arg(long)]
    pub op: Option<String>,
    /// Corrupt this op's backward rule, for exercising the failure path.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}
