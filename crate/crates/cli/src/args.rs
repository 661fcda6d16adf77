use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mmer", version, about = "Merge, mask and reconstruct fine-tuned checkpoints that share a base")]
pub struct Cli {
    /// Print machine-readable JSON instead of text
    #[arg(long, global = true)]
    pub json: bool,

    /// JSON pipeline config; command-line flags take precedence over it
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Task vector of a fine-tuned checkpoint: model - base
    Extract(ExtractArgs),
    /// Keep the TopK% largest-magnitude entries of a task vector
    Trim(TrimArgs),
    /// Randomly drop task-vector entries and rescale the survivors
    Dare(DareArgs),
    /// Merge task vectors with TIES or task arithmetic
    Merge(MergeArgs),
    /// Binary modality mask of a task vector against a merged vector
    Mask(MaskArgs),
    /// Element-wise average of binary masks
    Avgmask(AvgmaskArgs),
    /// Extract, merge and mask a set of fine-tuned models into a bundle directory
    Bundle(BundleArgs),
    /// base + mask * merged for one modality
    Reconstruct(ReconstructArgs),
    /// Decoupled forward pass of the reference transformer over a segmented sequence
    Infer(InferArgs),
    /// Mask and task-vector statistics
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Retention of candidate models against originals on synthetic tasks
    Retention(RetentionModelArgs),
    /// Run the synthetic retention, forgetting and sweep experiments
    Experiment(ExperimentArgs),
    /// Decode container, mask or experiment spec files and report problems
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Fine-tuned checkpoint
    pub model: Option<PathBuf>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrimArgs {
    pub input: PathBuf,
    /// TopK percentage to keep
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long, value_enum)]
    pub scope: Option<Scope>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DareArgs {
    pub input: PathBuf,
    /// Drop probability
    #[arg(long = "p", visible_alias = "dare-p")]
    pub p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// Task vectors to merge
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub scope: Option<Scope>,
    /// DARE drop probability applied to every input after trimming
    #[arg(long)]
    pub dare_p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    /// Task vector of the modality
    #[arg(long)]
    pub tau: PathBuf,
    /// Merged task vector
    #[arg(long)]
    pub merged: PathBuf,
    #[arg(long)]
    pub modality: String,
    /// `VALUE` or `MODALITY=VALUE`; repeatable
    #[arg(long)]
    pub lambda: Vec<String>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AvgmaskArgs {
    pub masks: Vec<PathBuf>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BundleArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Fine-tuned checkpoints as `MODALITY=PATH`, or `PATH` to use the file stem
    pub models: Vec<String>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub scope: Option<Scope>,
    #[arg(long)]
    pub dare_p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Vec<String>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    /// Compare masks against the raw task vectors instead of the preprocessed ones
    #[arg(long)]
    pub raw_reference: bool,
    /// Output directory
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub merged: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Bundle directory, used with --modality instead of --base/--merged/--mask
    #[arg(long, conflicts_with_all = ["merged", "mask"])]
    pub bundle: Option<PathBuf>,
    #[arg(long, requires = "bundle")]
    pub modality: Option<String>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, conflicts_with = "bundle")]
    pub base: Option<PathBuf>,
    #[arg(long, conflicts_with = "bundle")]
    pub merged: Option<PathBuf>,
    /// Modality masks, repeatable
    #[arg(long, conflicts_with = "bundle")]
    pub mask: Vec<PathBuf>,
    /// Model config JSON
    #[arg(long)]
    pub model: PathBuf,
    /// Segmented input sequence JSON
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub attention: Option<Attention>,
    #[arg(long, value_enum)]
    pub text_mask: Option<TextMask>,
    #[arg(long, value_enum)]
    pub head: Option<Head>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum StatsCommand {
    /// Fraction of set bits per mask
    Density { masks: Vec<PathBuf> },
    /// Pairwise and exclusive overlap of two or more masks
    Overlap { masks: Vec<PathBuf> },
    /// Directional alignment and average magnitude of a task vector against the merge
    Alignment {
        #[arg(long)]
        tau: PathBuf,
        #[arg(long)]
        merged: PathBuf,
        /// Count every entry in the denominator, not only nonzero ones
        #[arg(long)]
        all: bool,
    },
    /// Share of a task vector's nonzero entries that survive in the merge
    Inclusion {
        #[arg(long)]
        tau: PathBuf,
        #[arg(long)]
        merged: PathBuf,
        /// Count any nonzero merged value, regardless of sign
        #[arg(long)]
        nonzero_only: bool,
    },
    /// Storage cost in bits
    Storage {
        #[arg(long, value_enum)]
        method: StorageKind,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        p: u64,
        #[arg(long, default_value_t = 0)]
        p_prime: u64,
        #[arg(long)]
        p_star: Option<u64>,
    },
    /// Mean of per-task score ratios, from scores or from models
    Retention(RetentionArgs),
}

#[derive(Args, Debug)]
pub struct RetentionArgs {
    /// Method scores, comma-separated
    #[arg(long, value_delimiter = ',', requires = "original_scores")]
    pub scores: Vec<f64>,
    /// Original-model scores, comma-separated
    #[arg(long, value_delimiter = ',')]
    pub original_scores: Vec<f64>,
    #[command(flatten)]
    pub models: RetentionModelArgs,
}

#[derive(Args, Debug)]
pub struct RetentionModelArgs {
    /// Synthetic task JSON, repeatable
    #[arg(long)]
    pub task: Vec<PathBuf>,
    /// Original model per task
    #[arg(long)]
    pub original: Vec<PathBuf>,
    /// Candidate model per task
    #[arg(long)]
    pub candidate: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Experiment spec JSON
    pub spec: PathBuf,
    /// Run directory
    #[arg(short, long)]
    pub output: PathBuf,
    /// Sweep axes to run; defaults to all
    #[arg(long, value_enum)]
    pub sweep: Vec<Axis>,
    #[arg(long, conflicts_with = "sweep")]
    pub no_sweep: bool,
    #[arg(long)]
    pub no_forgetting: bool,
    /// Skip writing models, masks and bundles
    #[arg(long)]
    pub no_artifacts: bool,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ties,
    Ta,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Global,
    PerTensor,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoDirection,
    NoDominance,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attention {
    Causal,
    Bidirectional,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextMask {
    AllMasks,
    PresentOnly,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    PerSegment,
    Text,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageKind {
    Originals,
    Naivemc,
    Damc,
    Mmer,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    K,
    Lambda,
    NModels,
}
