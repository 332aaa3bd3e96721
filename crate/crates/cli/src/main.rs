mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use eeg2img::generation::BackendKind;
use eeg2img::model::{Space, Split};
use serde::Serialize;

/// EEG-to-image decoding: data preparation, encoder training, generation,
/// evaluation and ablation reports.
#[derive(Debug, Parser)]
#[command(name = "eeg2img", version)]
struct Cli {
    /// JSON file of default flag values; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read a raw dataset tree, preprocess signals and write a processed dataset.
    Ingest(IngestArgs),
    /// Write a synthetic raw dataset tree.
    Synth(SynthArgs),
    /// Assign recordings to stratified, stimulus-level train/val/test splits.
    Split(SplitArgs),
    /// Precompute alignment targets for every recording.
    CacheTargets(CacheArgs),
    /// Train an EEG encoder or the toy diffusion backend.
    Train(TrainArgs),
    /// Generate images for a split from trained encoders and a backend.
    Generate(GenerateArgs),
    /// Score a directory of generated images.
    Evaluate(EvaluateArgs),
    /// Run every condition of an experiment plan into one results CSV.
    Ablate(AblateArgs),
    /// Render a results CSV as a text table and bar charts.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Synth(_) => "synth",
            Command::Split(_) => "split",
            Command::CacheTargets(_) => "cache-targets",
            Command::Train(_) => "train",
            Command::Generate(_) => "generate",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum NormalizeArg {
    None,
    Zscore,
}

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    /// Raw tree with labels.csv, signals/ and stimuli/.
    #[arg(long)]
    raw: PathBuf,
    /// Output directory for the processed dataset.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "zscore")]
    normalize: NormalizeArg,
    /// First timestep kept (inclusive).
    #[arg(long, requires = "crop_end")]
    crop_start: Option<usize>,
    /// Last timestep kept (exclusive).
    #[arg(long, requires = "crop_start")]
    crop_end: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 6)]
    subjects: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 64)]
    timesteps: usize,
    /// Recordings per class.
    #[arg(long, default_value_t = 32)]
    per_class: usize,
    #[arg(long, default_value_t = 10)]
    stimuli_per_class: usize,
    #[arg(long, default_value_t = 8)]
    image_size: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train: f64,
    #[arg(long, default_value_t = 0.1)]
    val: f64,
    #[arg(long, default_value_t = 0.1)]
    test: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the split manifest (default: overwrite --manifest).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct CacheArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    space: Space,
    #[arg(long)]
    out: PathBuf,
    /// Embedding width of the stand-in extractor.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Tokens per caption (text space).
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
    /// Mean-pool text tokens into a single vector.
    #[arg(long)]
    pooled: bool,
    /// Caption template; must contain `{label}` once.
    #[arg(long)]
    caption_template: Option<String>,
    /// CSV of `stimulus_id,caption` replacing the template.
    #[arg(long, conflicts_with = "caption_template")]
    captions_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "snake_case")]
enum ModelArg {
    Encoder,
    ToyBackend,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Target cache (encoder).
    #[arg(long, required_if_eq("model", "encoder"))]
    cache: Option<PathBuf>,
    /// Image-space target cache (toy backend).
    #[arg(long, required_if_eq("model", "toy-backend"))]
    image_cache: Option<PathBuf>,
    /// Token-grid text target cache (toy backend).
    #[arg(long, required_if_eq("model", "toy-backend"))]
    text_cache: Option<PathBuf>,
    /// Encoder epochs.
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Toy backend optimizer steps.
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Default 16 for encoders, 32 for the toy backend.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Recurrent layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Recurrent hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Hidden width of the projection head.
    #[arg(long)]
    head_hidden: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct GenerateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    image_encoder: PathBuf,
    #[arg(long)]
    text_encoder: PathBuf,
    /// Backend checkpoint (toy backend).
    #[arg(long)]
    backend: PathBuf,
    #[arg(long, default_value = "toy")]
    backend_kind: BackendKind,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Denoising steps.
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long)]
    drop_text: bool,
    #[arg(long)]
    drop_image: bool,
    /// Weight of the image branch of cross-attention.
    #[arg(long, default_value_t = 1.0)]
    image_scale: f32,
    #[arg(long, default_value_t = 1)]
    samples_per_recording: usize,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args, Serialize, Clone)]
struct MetricArgs {
    /// Ways of the N-way top-K accuracy.
    #[arg(long, default_value_t = 50)]
    acc_n: usize,
    #[arg(long, default_value_t = 1)]
    acc_k: usize,
    #[arg(long, default_value_t = 40)]
    acc_trials: usize,
    #[arg(long, default_value_t = 10)]
    is_splits: usize,
    #[arg(long, default_value_t = 11)]
    ssim_window: usize,
    #[arg(long, default_value_t = 1.5)]
    ssim_sigma: f64,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    /// Directory of generated PNGs.
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Ground-truth PNGs with matching file names (default: dataset stimuli).
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Results CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Row label in the results CSV.
    #[arg(long, default_value = "evaluate")]
    condition: String,
    /// Seed of the accuracy trials.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    metrics: MetricArgs,
}

#[derive(Debug, Args, Serialize)]
struct AblateArgs {
    #[arg(long)]
    plan: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    /// Directory for table.txt and the bar charts.
    #[arg(long)]
    out: PathBuf,
}

fn parse() -> Result<Cli, clap::Error> {
    let argv = config::expand(std::env::args_os().collect())
        .map_err(|m| Cli::command().error(clap::error::ErrorKind::Io, m))?;
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    let matches = cmd.try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = cli.command.name();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
