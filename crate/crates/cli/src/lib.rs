//! `bilin`: reproducible pipelines over the `bilin-core` library.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 I/O, 4 numeric failure.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod params;
pub mod svg;

/// A usage or configuration problem; maps to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<bilin_core::Error>() {
            return if e.is_io() {
                EXIT_IO
            } else if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_USAGE
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

#[derive(Debug, Parser)]
#[command(name = "bilin", version, about = "Bilinear descriptors and open-set identification pipelines")]
pub struct Cli {
    /// Worker threads for encoding, SVM training and evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset: feature maps plus split metadata.
    Synth(SynthArgs),
    /// Encode every feature map under a directory into a descriptor file.
    Encode(EncodeArgs),
    /// Fine-tune the toy extractor and softmax head on the two-class task.
    Finetune(FinetuneArgs),
    /// Train one-vs-rest gallery models for every split.
    TrainGallery(TrainGalleryArgs),
    /// Identify probe templates and write CMC, DET and summary files.
    Eval(EvalArgs),
    /// Render a CMC or DET CSV as an SVG chart.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_identities: Option<usize>,
    #[arg(long)]
    pub train_identities: Option<usize>,
    #[arg(long)]
    pub templates_per_identity: Option<usize>,
    #[arg(long)]
    pub media_per_template: Option<usize>,
    /// `HxWxC`, e.g. 10x10x8.
    #[arg(long)]
    pub map_dims: Option<String>,
    #[arg(long)]
    pub impostor_fraction: Option<f64>,
    #[arg(long)]
    pub gallery_fraction: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub num_splits: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EncodeMode {
    /// Symmetric bilinear pooling, signed square root, L2 normalization.
    Bilinear,
    /// Location-averaged first-order features, L2 normalized.
    FirstOrder,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Directory searched recursively for `.bfm` files.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<EncodeMode>,
    /// Overwrite existing descriptors.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_lower: Option<f64>,
    #[arg(long)]
    pub lr_last: Option<f64>,
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub out_channels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainGalleryArgs {
    /// Dataset root holding `split_*.csv` metadata.
    #[arg(long)]
    pub data: PathBuf,
    /// Output of `bilin encode` over the dataset root.
    #[arg(long)]
    pub descriptors: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// SVM regularization constant.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Reweight hinge terms so both classes carry equal total weight.
    #[arg(long)]
    pub balanced: bool,
    /// Keep unscaled scores for identities whose classifier cannot separate
    /// the median positive from the median negative score.
    #[arg(long)]
    pub allow_degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Pooling {
    Score,
    Feature,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub descriptors: PathBuf,
    /// Output of `bilin train-gallery`.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub pooling: Option<Pooling>,
    /// Also count a mated probe as a miss when its true identity is not ranked first.
    #[arg(long)]
    pub fnir_rank1: bool,
    #[arg(long)]
    pub max_rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    Auto,
    Cmc,
    Det,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    pub kind: PlotKind,
    #[arg(long)]
    pub title: Option<String>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Usage(format!("cannot start {} worker threads: {e}", cli.threads)))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => commands::synth::run(a),
        Command::Encode(a) => commands::encode::run(a),
        Command::Finetune(a) => commands::finetune::run(a),
        Command::TrainGallery(a) => commands::gallery::run(a),
        Command::Eval(a) => commands::eval::run(a),
        Command::Plot(a) => commands::plot::run(a),
    })
}
