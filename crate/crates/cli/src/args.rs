use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pslnet", version, about = "Joint denoising and watermark removal")]
pub struct Cli {
    /// Where to write the run manifest (defaults next to the command's output).
    #[arg(long, global = true)]
    pub run_manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus generation.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model on a corpus manifest.
    Train(TrainArgs),
    /// Score a checkpoint against the clean images of a corpus.
    Eval(EvalArgs),
    /// Watermark (and optionally add noise to) a single image.
    Degrade(DegradeArgs),
    /// Restore a single image.
    Infer(InferArgs),
    /// Parameter count and FLOPs of a model configuration.
    Summary(SummaryArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Build a self-supervised training corpus.
    Build(DatasetBuildArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Branch {
    Fused,
    Upper,
    Lower,
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Global seed.
    #[arg(long, env = "PSLNET_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DatasetBuildArgs {
    /// Directory of clean PNG images.
    #[arg(long, required_unless_present = "synthetic")]
    pub clean_dir: Option<PathBuf>,
    /// Directory of RGBA PNG watermarks.
    #[arg(long, required_unless_present = "synthetic")]
    pub wm_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub patch_size: usize,
    /// Patch stride (defaults to the patch size).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Noise levels on the 0–255 scale.
    #[arg(long, value_delimiter = ',', default_value = "0,25,50")]
    pub sigmas: Vec<f32>,
    /// Fixed transparency values.
    #[arg(long, value_delimiter = ',', conflicts_with = "alpha_blind")]
    pub alphas: Option<Vec<f32>>,
    /// Uniform transparency range LOW,HIGH.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub alpha_blind: Option<Vec<f32>>,
    #[arg(long, default_value_t = 0.4)]
    pub coverage_max: f32,
    /// Watermark scale range LOW,HIGH.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub scale_range: Option<Vec<f32>>,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Generate N synthetic clean images and watermarks instead of reading directories.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Side length of synthetic images.
    #[arg(long, default_value_t = 128)]
    pub synthetic_size: usize,
    /// Number of synthetic watermarks.
    #[arg(long, default_value_t = 8)]
    pub synthetic_watermarks: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Training checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    /// JSON training config; replaces the preset, flags still override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<u64>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub losstype: Option<LossArg>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Perception network weights (checkpoint container).
    #[arg(long)]
    pub pn_weights: Option<PathBuf>,
    #[arg(long)]
    pub no_interactions: bool,
    #[arg(long)]
    pub no_em: bool,
    #[arg(long)]
    pub no_texture_loss: bool,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    /// Clamp both interaction gates to 1.
    #[arg(long)]
    pub no_interactions: bool,
    /// Use the lower-branch output instead of the fused output.
    #[arg(long)]
    pub no_em: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sigma: Option<f32>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write clean | degraded | restored strips here.
    #[arg(long)]
    pub grid_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub grid_count: usize,
    #[command(flatten)]
    pub ablation: AblationArgs,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// RGBA watermark PNG.
    #[arg(long)]
    pub wm: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f32,
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f32,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f32,
    /// TOP,LEFT offset; drawn uniformly from the seed when absent.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub position: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1.0)]
    pub coverage_max: f32,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Branch::Fused)]
    pub output: Branch,
    #[command(flatten)]
    pub ablation: AblationArgs,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    pub preset: Preset,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
    /// Also write the JSON summary here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print every layer.
    #[arg(long)]
    pub layers: bool,
}
