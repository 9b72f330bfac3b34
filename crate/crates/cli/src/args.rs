use std::path::PathBuf;

use brain_diffae::data::Cohort;
use brain_diffae::training::Precision;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub const OUT_DIR_ENV: &str = "BRAIN_DIFFAE_OUT_DIR";
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(name = "brain-diffae", version, about = "Brain age prediction with a semi-supervised diffusion autoencoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic aging phantoms with a manifest.
    SynthData(SynthArgs),
    /// Extract medial axial slices from NIfTI volumes listed in a manifest.
    Preprocess(PreprocessArgs),
    /// Train a model on the train cohort of a manifest.
    Train(TrainArgs),
    /// Write age predictions for manifest records.
    Predict(PredictArgs),
    /// Predict a cohort and write the evaluation report.
    Evaluate(EvaluateArgs),
    /// Reconstruct images from their semantic latents.
    Reconstruct(ReconstructArgs),
    /// Decode images along the line between two subjects' latents.
    Interpolate(InterpolateArgs),
    /// Build the evaluation report from an existing predictions file.
    Stats(StatsArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::Preprocess(_) => "preprocess",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::Reconstruct(_) => "reconstruct",
            Command::Interpolate(_) => "interpolate",
            Command::Stats(_) => "stats",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct OutArg {
    /// Output directory [default: $BRAIN_DIFFAE_OUT_DIR/<command>, else out/<command>].
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Number of training-cohort phantoms.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Number of additional held-out test phantoms.
    #[arg(long, default_value_t = 0)]
    pub n_test: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 20.0)]
    pub age_min: f64,
    #[arg(long, default_value_t = 90.0)]
    pub age_max: f64,
    #[arg(long, default_value_t = 0.2)]
    pub unlabeled_fraction: f64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArg,
}

#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    /// Manifest whose image_path entries point at NIfTI volumes.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output slice size in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Number of neighbouring axial slices per volume, centred on the medial one.
    #[arg(long, default_value_t = 1)]
    pub slices: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArg,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML file with `preset`, `[model]`, `[schedule]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint directory; its stored config is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Model preset: full, reduced or tiny.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub age_loss_weight: Option<f64>,
    #[arg(long)]
    pub unlabeled_fraction: Option<f64>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArg,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    /// Directory holding model.safetensors and model.json.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[command(flatten)]
    pub io: ModelArgs,
    /// Restrict to one cohort (train, test, patient); all records by default.
    #[arg(long, value_parser = parse_cohort)]
    pub cohort: Option<Cohort>,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArg,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    /// External `id,predicted_age` file whose PADs are compared by a KS test.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Name shown for the external model [default: file stem].
    #[arg(long)]
    pub compare_label: Option<String>,
    /// Also report PADs residualised on chronological age.
    #[arg(long)]
    pub bias_correct: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub io: ModelArgs,
    #[arg(long, value_parser = parse_cohort, default_value = "test")]
    pub cohort: Cohort,
    #[command(flatten)]
    pub compare: CompareArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArg,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    /// `id,predicted_age` file for the cohort.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_parser = parse_cohort, default_value = "test")]
    pub cohort: Cohort,
    #[command(flatten)]
    pub compare: CompareArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArg,
}

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub io: ModelArgs,
    #[arg(long, value_parser = parse_cohort, default_value = "test")]
    pub cohort: Cohort,
    /// Comma-separated record ids; otherwise the first `--n` of the cohort.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Number of reverse steps.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArg,
}

#[derive(Debug, Args, Serialize)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub io: ModelArgs,
    /// Record id of the start subject.
    #[arg(long)]
    pub a: String,
    /// Record id of the end subject.
    #[arg(long)]
    pub b: String,
    /// Number of images along the path, endpoints included.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    /// Number of reverse steps per image.
    #[arg(long, default_value_t = 50)]
    pub inference_steps: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArg,
}

fn parse_cohort(s: &str) -> Result<Cohort, String> {
    s.parse()
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
    }
}
