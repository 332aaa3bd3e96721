//! Glue between the pipeline stages: conditioning bundles from trained
//! encoders, split-wide generation, directory evaluation, ablation plans and
//! the results report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::caption::CaptionProviderConfig;
use crate::dataset::Dataset;
use crate::embedding::StandInImageEmbedder;
use crate::encoder::{stack_signals, Encoder, EncoderCheckpoint};
use crate::error::{Error, Result};
use crate::generation::{
    generate_many, BackendConfig, BackendKind, ConditioningBundle, DiffusionBackend, Provenance, RealAdapter,
    ToyCheckpoint, ToyTrainingItem, DEFAULT_INFERENCE_STEPS,
};
use crate::metrics::{evaluate, ImagePair, MetricConfig, MetricReport, PrototypeClassifier, RESULTS_HEADER};
use crate::model::{load_png, quantize_pixels, resolve, save_png, EegRecording, EmbeddingShape, Space, Split};
use crate::training::TargetCache;

pub const METRIC_EXTRACTOR_DIM: usize = 64;
pub const METRIC_EXTRACTOR_SEED: u64 = 0x3e7c_0001;

/// Feature extractor behind FID and CS when no pretrained one is plugged in.
/// Deliberately distinct from the alignment-target extractors.
pub fn metric_extractor() -> StandInImageEmbedder {
    StandInImageEmbedder::new(METRIC_EXTRACTOR_DIM, METRIC_EXTRACTOR_SEED)
}

/// Classifier for ACC and IS: colour-layout prototypes of the training
/// stimuli (all stimuli when the dataset is unsplit).
pub fn reference_classifier(dataset: &Dataset) -> Result<PrototypeClassifier> {
    let allowed: Option<BTreeSet<&str>> = match &dataset.manifest.splits {
        Some(s) if !s.train.is_empty() => Some(
            s.train
                .iter()
                .filter_map(|id| dataset.recording(id))
                .map(|r| r.stimulus_id.as_str())
                .collect(),
        ),
        _ => None,
    };
    let examples = dataset
        .stimuli
        .values()
        .filter(|s| allowed.as_ref().is_none_or(|a| a.contains(s.stimulus_id.as_str())))
        .map(|s| (s.class_id, &s.pixels));
    PrototypeClassifier::from_examples(examples, dataset.manifest.n_classes)
}

/// One toy-backend training pair per distinct stimulus of `split`,
/// conditioned on the cached ground-truth targets.
pub fn toy_items_from_caches(
    dataset: &Dataset,
    split: Split,
    image_cache: &TargetCache,
    text_cache: &TargetCache,
) -> Result<Vec<ToyTrainingItem>> {
    if image_cache.space != Space::Image || text_cache.space != Space::Text {
        return Err(Error::Config("expected one image-space and one text-space target cache".into()));
    }
    let EmbeddingShape::Grid { tokens, dim } = text_cache.shape else {
        return Err(Error::Config("the toy backend needs token-grid text targets (not pooled)".into()));
    };
    let mut seen = BTreeMap::new();
    for r in dataset.recordings_in(split)? {
        seen.entry(r.stimulus_id.clone()).or_insert(r);
    }
    seen.values()
        .map(|r| {
            let text = text_cache.get(&r.recording_id)?.clone();
            Ok(ToyTrainingItem {
                image: dataset.stimulus_of(r)?.pixels.clone(),
                bundle: ConditioningBundle::new(
                    text.into_shape_with_order((tokens, dim)).map_err(|e| Error::Shape(e.to_string()))?,
                    image_cache.get(&r.recording_id)?.clone(),
                ),
            })
        })
        .collect()
}

/// The two trained encoders whose outputs condition generation.
#[derive(Debug, Clone)]
pub struct ConditionEncoders {
    pub image: Encoder<f32>,
    pub text: Encoder<f32>,
    pub image_hash: String,
    pub text_hash: String,
}

impl ConditionEncoders {
    pub fn from_checkpoints(image: &EncoderCheckpoint, text: &EncoderCheckpoint) -> Result<Self> {
        if image.header.space != Space::Image {
            return Err(Error::Config(format!("image encoder checkpoint was trained for {}", image.header.space)));
        }
        if text.header.space != Space::Text {
            return Err(Error::Config(format!("text encoder checkpoint was trained for {}", text.header.space)));
        }
        if !matches!(text.header.config.output_shape, EmbeddingShape::Grid { .. }) {
            return Err(Error::Config("text encoder must predict a token grid".into()));
        }
        Ok(ConditionEncoders {
            image: image.to_encoder()?,
            text: text.to_encoder()?,
            image_hash: image.content_hash(),
            text_hash: text.content_hash(),
        })
    }

    pub fn load(image: &Path, text: &Path) -> Result<Self> {
        Self::from_checkpoints(&EncoderCheckpoint::load(image)?, &EncoderCheckpoint::load(text)?)
    }
}

/// How generation is conditioned and how many images are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub image_scale: f32,
    pub drop_text: bool,
    pub drop_image: bool,
    /// Independent samples per recording.
    pub samples_per_recording: usize,
    /// Cap on the number of images, taken in split order.
    pub limit: Option<usize>,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            image_scale: 1.0,
            drop_text: false,
            drop_image: false,
            samples_per_recording: 1,
            limit: None,
        }
    }
}

/// Bundles for `recordings` from batched inference-mode encoder passes.
pub fn conditioning_bundles(
    recordings: &[&EegRecording],
    encoders: &ConditionEncoders,
    options: &GenerationOptions,
) -> Result<Vec<ConditioningBundle>> {
    if recordings.is_empty() {
        return Ok(Vec::new());
    }
    let views: Vec<_> = recordings.iter().map(|r| r.signal.view()).collect();
    let x = stack_signals(&views)?;
    let image = encoders.image.forward_batch(x.view())?;
    let text = encoders.text.forward_batch(x.view())?;
    let EmbeddingShape::Grid { tokens, dim } = encoders.text.config.output_shape else {
        unreachable!("checked when loading");
    };
    let checkpoints: BTreeMap<String, String> = [
        (Space::Image.to_string(), encoders.image_hash.clone()),
        (Space::Text.to_string(), encoders.text_hash.clone()),
    ]
    .into();
    Ok(recordings
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let grid = text.index_axis(Axis(0), i).to_owned().into_shape_with_order((tokens, dim)).expect("contiguous");
            let mut b = ConditioningBundle::new(grid, image.index_axis(Axis(0), i).to_owned());
            b.image_scale = options.image_scale;
            b.drop_text = options.drop_text;
            b.drop_image = options.drop_image;
            b.origin.recording_id = Some(r.recording_id.clone());
            b.origin.encoder_checkpoints = checkpoints.clone();
            b
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub id: String,
    pub recording_id: String,
    /// 8-bit quantized, exactly as stored on disk.
    pub image: Array3<f32>,
    pub provenance: Provenance,
}

fn item_id(recording_id: &str, k: usize, per_recording: usize) -> String {
    if per_recording == 1 {
        recording_id.to_string()
    } else {
        format!("{recording_id}-s{k}")
    }
}

/// Generates images for the recordings of `split`.
pub fn generate_split(
    dataset: &Dataset,
    split: Split,
    encoders: &ConditionEncoders,
    backend: &dyn DiffusionBackend,
    config: &BackendConfig,
    options: &GenerationOptions,
) -> Result<Vec<GeneratedImage>> {
    if options.samples_per_recording == 0 {
        return Err(Error::Config("samples_per_recording must be positive".into()));
    }
    let recordings = dataset.recordings_in(split)?;
    if recordings.is_empty() {
        return Err(Error::Dataset(format!("split {split} is empty")));
    }
    let bundles = conditioning_bundles(&recordings, encoders, options)?;
    let mut items = Vec::new();
    'outer: for (r, b) in recordings.iter().zip(&bundles) {
        for k in 0..options.samples_per_recording {
            if options.limit.is_some_and(|l| items.len() >= l) {
                break 'outer;
            }
            items.push((item_id(&r.recording_id, k, options.samples_per_recording), b.clone()));
        }
    }
    let results = generate_many(backend, &items, config);
    items
        .into_iter()
        .zip(results)
        .map(|((id, bundle), result)| {
            let result = result.map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} while generating {id}"),
                },
                other => other,
            })?;
            Ok(GeneratedImage {
                id,
                recording_id: bundle.origin.recording_id.clone().expect("set above"),
                image: quantize_pixels(&result.image),
                provenance: result.provenance,
            })
        })
        .collect()
}

/// Writes `<id>.png` plus a `<id>.json` provenance sidecar per image.
pub fn write_generated(dir: &Path, images: &[GeneratedImage]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for g in images {
        save_png(&dir.join(format!("{}.png", g.id)), &g.image)?;
        let json = serde_json::to_string_pretty(&g.provenance).map_err(|e| Error::parse("provenance", e))?;
        let path = dir.join(format!("{}.json", g.id));
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// A generated image as read back for evaluation.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub id: String,
    /// Recording named by the provenance sidecar, if there is one.
    pub recording_id: Option<String>,
    pub image: Array3<f32>,
}

impl From<&GeneratedImage> for LoadedImage {
    fn from(g: &GeneratedImage) -> Self {
        LoadedImage {
            id: g.id.clone(),
            recording_id: Some(g.recording_id.clone()),
            image: g.image.clone(),
        }
    }
}

/// Reads every PNG of `dir`, sorted by id.
pub fn load_generated(dir: &Path) -> Result<Vec<LoadedImage>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort_by_cached_key(|p| p.file_stem().map(|s| s.to_os_string()));
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let sidecar = p.with_extension("json");
            let recording_id = if sidecar.is_file() {
                let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
                let prov: Provenance =
                    serde_json::from_str(&text).map_err(|e| Error::parse(sidecar.display().to_string(), e))?;
                prov.recording_id
            } else {
                None
            };
            Ok(LoadedImage {
                id,
                recording_id,
                image: load_png(&p)?,
            })
        })
        .collect()
}

/// Pairs generated images with their ground truth and computes all metrics.
///
/// An image id resolves through its provenance recording, then as a
/// recording id, then as a stimulus id. With `ground_truth_dir`, the ground
/// truth is the file of the same name there instead of the dataset stimulus.
/// Images are scored in id order whatever order they arrive in.
pub fn evaluate_images(
    dataset: &Dataset,
    images: &[LoadedImage],
    ground_truth_dir: Option<&Path>,
    config: &MetricConfig,
) -> Result<MetricReport> {
    let mut images: Vec<&LoadedImage> = images.iter().collect();
    images.sort_by(|a, b| a.id.cmp(&b.id));
    let mut resolved = Vec::with_capacity(images.len());
    for img in &images {
        let stimulus = match img.recording_id.as_deref().or(Some(img.id.as_str())).and_then(|r| dataset.recording(r)) {
            Some(r) => dataset.stimulus_of(r)?,
            None => dataset
                .stimuli
                .get(&img.id)
                .ok_or_else(|| Error::Dataset(format!("image {} matches no recording or stimulus", img.id)))?,
        };
        let truth = match ground_truth_dir {
            Some(dir) => load_png(&dir.join(format!("{}.png", img.id)))?,
            None => stimulus.pixels.clone(),
        };
        resolved.push((stimulus.class_id, truth));
    }
    let pairs: Vec<ImagePair<'_>> = images
        .iter()
        .zip(&resolved)
        .map(|(img, (class_id, truth))| ImagePair {
            id: &img.id,
            generated: &img.image,
            ground_truth: truth,
            class_id: *class_id,
        })
        .collect();
    let classifier = reference_classifier(dataset)?;
    let extractor = metric_extractor();
    let mut config = config.clone();
    config.feature_extractor_id = crate::embedding::ImageEmbedder::id(&extractor);
    evaluate(&pairs, &classifier, &extractor, &config)
}

/// One row of an ablation plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub name: String,
    pub image_encoder: PathBuf,
    pub text_encoder: PathBuf,
    pub backend: PathBuf,
    #[serde(default)]
    pub backend_kind: Option<BackendKind>,
    #[serde(default = "default_steps")]
    pub inference_steps: usize,
    #[serde(default)]
    pub drop_text: bool,
    #[serde(default)]
    pub drop_image: bool,
    #[serde(default = "default_scale")]
    pub image_scale: f32,
    /// Which captions the text encoder was aligned to; recorded with the
    /// results, the encoder checkpoint itself determines the conditioning.
    #[serde(default)]
    pub caption_provider: Option<CaptionProviderConfig>,
    #[serde(default)]
    pub metrics: MetricConfig,
}

fn default_steps() -> usize {
    DEFAULT_INFERENCE_STEPS
}

fn default_scale() -> f32 {
    1.0
}

fn default_samples() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub seed: u64,
    pub dataset: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
    pub output_dir: PathBuf,
    #[serde(default = "default_samples")]
    pub samples_per_recording: usize,
    #[serde(default)]
    pub limit: Option<usize>,
    pub conditions: Vec<ConditionSpec>,
}

fn default_split() -> Split {
    Split::Test
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan: ExperimentPlan = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        plan.rebase(base);
        Ok(plan)
    }

    /// Makes relative paths relative to `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| *p = resolve(base, &p.to_string_lossy());
        fix(&mut self.dataset);
        fix(&mut self.output_dir);
        for c in &mut self.conditions {
            fix(&mut c.image_encoder);
            fix(&mut c.text_encoder);
            fix(&mut c.backend);
        }
    }

    /// Structural checks plus existence of every referenced file.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut names = BTreeSet::new();
        for c in &self.conditions {
            if c.name.is_empty() || c.name.contains([',', '"', '\n', '/']) {
                problems.push(format!("condition name {:?} must be non-empty without , \" / or newlines", c.name));
            }
            if !names.insert(c.name.as_str()) {
                problems.push(format!("duplicate condition name {}", c.name));
            }
            for (what, p) in [("image encoder", &c.image_encoder), ("text encoder", &c.text_encoder), ("backend", &c.backend)] {
                if c.backend_kind == Some(BackendKind::RealAdapter) && what == "backend" {
                    continue;
                }
                if !p.is_file() {
                    problems.push(format!("condition {}: missing {what} checkpoint {}", c.name, p.display()));
                }
            }
            if let Err(e) = c.metrics.validate() {
                problems.push(format!("condition {}: {e}", c.name));
            }
            if let Some(cp) = &c.caption_provider {
                if let Err(e) = cp.validate() {
                    problems.push(format!("condition {}: {e}", c.name));
                }
            }
        }
        if self.samples_per_recording == 0 {
            problems.push("samples_per_recording must be positive".into());
        }
        if !self.conditions.is_empty() && !self.dataset.is_file() {
            problems.push(format!("missing dataset manifest {}", self.dataset.display()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub name: String,
    pub report: MetricReport,
    pub images: Vec<GeneratedImage>,
}

/// The generation half of a condition: loads its checkpoints and samples
/// images for `split`.
pub fn generate_condition(
    dataset: &Dataset,
    condition: &ConditionSpec,
    split: Split,
    seed: u64,
    samples_per_recording: usize,
    limit: Option<usize>,
) -> Result<Vec<GeneratedImage>> {
    let encoders = ConditionEncoders::load(&condition.image_encoder, &condition.text_encoder)?;
    let kind = condition.backend_kind.unwrap_or(BackendKind::Toy);
    let backend: Box<dyn DiffusionBackend> = match kind {
        BackendKind::Toy => Box::new(ToyCheckpoint::load(&condition.backend)?.to_backend()?),
        BackendKind::RealAdapter => {
            RealAdapter::open(None)?;
            unreachable!("the real adapter never opens in this build")
        }
    };
    let config = BackendConfig {
        kind,
        inference_steps: condition.inference_steps,
        sampler: "ancestral".into(),
        image_size: backend.image_size(),
        seed,
    };
    let options = GenerationOptions {
        image_scale: condition.image_scale,
        drop_text: condition.drop_text,
        drop_image: condition.drop_image,
        samples_per_recording,
        limit,
    };
    generate_split(dataset, split, &encoders, backend.as_ref(), &config, &options)
}

/// Generates and evaluates one condition.
pub fn run_condition(
    dataset: &Dataset,
    condition: &ConditionSpec,
    split: Split,
    seed: u64,
    samples_per_recording: usize,
    limit: Option<usize>,
) -> Result<ConditionResult> {
    let images = generate_condition(dataset, condition, split, seed, samples_per_recording, limit)?;
    let loaded: Vec<LoadedImage> = images.iter().map(LoadedImage::from).collect();
    let metrics = MetricConfig {
        seed,
        ..condition.metrics.clone()
    };
    let report = evaluate_images(dataset, &loaded, None, &metrics)?;
    Ok(ConditionResult {
        name: condition.name.clone(),
        report,
        images,
    })
}

pub const FAILED_MARKER: &str = "FAILED";

/// Runs every condition in plan order and writes `results.csv` (plus images
/// and a metrics JSON per condition) under the plan's output directory.
/// Completed rows survive a failing condition, followed by a FAILED row.
pub fn run_ablation(plan: &ExperimentPlan) -> Result<(PathBuf, Vec<ConditionResult>)> {
    plan.validate()?;
    let out = &plan.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv_path = out.join("results.csv");
    let mut csv = format!("{RESULTS_HEADER}\n");
    let write = |text: &str| fs::write(&csv_path, text).map_err(|e| Error::io(&csv_path, e));
    write(&csv)?;
    if plan.conditions.is_empty() {
        return Ok((csv_path, Vec::new()));
    }
    let dataset = Dataset::load(&plan.dataset)?;
    let mut results = Vec::new();
    for condition in &plan.conditions {
        let outcome = run_condition(&dataset, condition, plan.split, plan.seed, plan.samples_per_recording, plan.limit)
            .and_then(|r| {
                let dir = out.join(&r.name);
                write_generated(&dir, &r.images)?;
                let json = serde_json::to_string_pretty(&r.report).map_err(|e| Error::parse("metric report", e))?;
                fs::write(dir.join("metrics.json"), json + "\n").map_err(|e| Error::io(&dir, e))?;
                Ok(r)
            });
        match outcome {
            Ok(r) => {
                csv.push_str(&r.report.csv_row(&r.name));
                csv.push('\n');
                write(&csv)?;
                results.push(r);
            }
            Err(e) => {
                csv.push_str(&format!("{},{FAILED_MARKER},,,,,\n", condition.name));
                write(&csv)?;
                return Err(match e {
                    Error::Validation(v) => Error::Validation(v),
                    other => Error::Dataset(format!("condition {} failed: {other}", condition.name)),
                });
            }
        }
    }
    Ok((csv_path, results))
}

const COLUMNS: [&str; 6] = ["acc", "is_mean", "is_std", "fid", "ssim", "cs"];

/// A parsed results row; cells keep their original text.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub condition: String,
    pub failed: bool,
    /// Text of each metric column (empty when absent).
    pub cells: [String; 6],
}

impl ResultRow {
    fn value(&self, column: usize) -> Option<f64> {
        self.cells[column].parse().ok()
    }
}

/// Parses a results CSV, rejecting non-numeric metric cells with the line
/// number and column name.
pub fn parse_results(text: &str, what: &str) -> Result<Vec<ResultRow>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::parse(what, format!("line 1: {e}")))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != RESULTS_HEADER {
        return Err(Error::parse(what, format!("line 1: header must be {RESULTS_HEADER}")));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(what, format!("line {line}: {e}")))?;
        if record.len() != 7 {
            return Err(Error::parse(what, format!("line {line}: expected 7 fields, found {}", record.len())));
        }
        let failed = &record[1] == FAILED_MARKER;
        let mut cells: [String; 6] = Default::default();
        for (j, name) in COLUMNS.iter().enumerate() {
            let cell = record[j + 1].trim();
            if !failed && !cell.is_empty() && !cell.parse::<f64>().is_ok_and(f64::is_finite) {
                return Err(Error::parse(
                    what,
                    format!("line {line}: column {name} has non-numeric value {cell:?}"),
                ));
            }
            cells[j] = cell.to_string();
        }
        rows.push(ResultRow {
            condition: record[0].to_string(),
            failed,
            cells,
        });
    }
    Ok(rows)
}

/// Renders a fraction as a percentage by moving the decimal point of its
/// text, so that `0.952` becomes `95.2` without float noise.
pub fn percent_text(fraction: &str) -> String {
    let plain = fraction.trim();
    let (neg, digits) = match plain.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, plain),
    };
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit() || c == '.') || digits.matches('.').count() > 1 {
        let v: f64 = plain.parse().unwrap_or(f64::NAN);
        return format!("{}", (v * 100.0 * 1e10).round() / 1e10);
    }
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    let mut frac = frac.to_string();
    while frac.len() < 2 {
        frac.push('0');
    }
    let moved = format!("{int}{}", &frac[..2]);
    let int = moved.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let rest = frac[2..].trim_end_matches('0');
    let sign = if neg { "-" } else { "" };
    if rest.is_empty() {
        format!("{sign}{int}")
    } else {
        format!("{sign}{int}.{rest}")
    }
}

/// Aligned text table: ACC as a percentage, IS as `mean ± std`, the other
/// metrics verbatim.
pub fn render_table(rows: &[ResultRow]) -> String {
    let header = ["Condition", "ACC ↑", "IS ↑", "FID ↓", "SSIM ↑", "CS ↑"].map(String::from);
    let dash = |s: &str| if s.is_empty() { "-".to_string() } else { s.to_string() };
    let mut table = vec![header.to_vec()];
    for r in rows {
        if r.failed {
            let mut line = vec![r.condition.clone(), FAILED_MARKER.to_string()];
            line.extend(std::iter::repeat_n("-".to_string(), 4));
            table.push(line);
            continue;
        }
        let acc = if r.cells[0].is_empty() { "-".into() } else { percent_text(&r.cells[0]) };
        let is = match (r.cells[1].as_str(), r.cells[2].as_str()) {
            ("", _) => "-".to_string(),
            (m, "") => m.to_string(),
            (m, s) => format!("{m} ± {s}"),
        };
        table.push(vec![r.condition.clone(), acc, is, dash(&r.cells[3]), dash(&r.cells[4]), dash(&r.cells[5])]);
    }
    let widths: Vec<usize> = (0..6)
        .map(|j| table.iter().map(|row| row[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let pad = widths[j] - c.chars().count();
                if j == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

/// Simple bar chart: one bar per condition, heights relative to the largest
/// magnitude; failed or missing values are left blank.
pub fn bar_chart(values: &[Option<f64>]) -> RgbImage {
    const BAR: u32 = 40;
    const GAP: u32 = 20;
    const HEIGHT: u32 = 200;
    let n = values.len().max(1) as u32;
    let width = GAP + n * (BAR + GAP);
    let mut img = RgbImage::from_pixel(width, HEIGHT + 2 * GAP, Rgb([255, 255, 255]));
    let max = values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let base = HEIGHT + GAP;
    for x in GAP / 2..width - GAP / 2 {
        img.put_pixel(x, base, Rgb([0, 0, 0]));
    }
    for (i, v) in values.iter().enumerate() {
        let Some(v) = v else { continue };
        let h = if max > 0.0 { ((v.abs() / max) * HEIGHT as f64).round() as u32 } else { 0 };
        let x0 = GAP + i as u32 * (BAR + GAP);
        let color = if *v < 0.0 { Rgb([200, 60, 60]) } else { Rgb([60, 100, 200]) };
        for x in x0..x0 + BAR {
            for y in base.saturating_sub(h)..base {
                img.put_pixel(x, y, color);
            }
        }
    }
    img
}

/// Writes `table.txt` and one bar chart per metric into `out_dir`; returns
/// the table text.
pub fn write_report(results_csv: &Path, out_dir: &Path) -> Result<String> {
    let text = fs::read_to_string(results_csv).map_err(|e| Error::io(results_csv, e))?;
    let rows = parse_results(&text, &results_csv.display().to_string())?;
    let table = render_table(&rows);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("table.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    for (j, name) in COLUMNS.iter().enumerate() {
        if *name == "is_std" {
            continue;
        }
        let values: Vec<Option<f64>> = rows.iter().map(|r| if r.failed { None } else { r.value(j) }).collect();
        let file = out_dir.join(format!("{name}.png"));
        bar_chart(&values).save(&file).map_err(|e| Error::Image(format!("{}: {e}", file.display())))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_text_moves_the_decimal_point() {
        assert_eq!(percent_text("0.952"), "95.2");
        assert_eq!(percent_text("1"), "100");
        assert_eq!(percent_text("1.0"), "100");
        assert_eq!(percent_text("0.02"), "2");
        assert_eq!(percent_text("0.0025"), "0.25");
        assert_eq!(percent_text("0.95238"), "95.238");
        assert_eq!(percent_text("0"), "0");
        assert_eq!(percent_text("1e-3"), "0.1");
    }

    #[test]
    fn table_renders_published_row_verbatim() {
        let csv = "condition,acc,is_mean,is_std,fid,ssim,cs\nOriginal,0.952,28.11,,69.97,0.2277,0.7575\n";
        let rows = parse_results(csv, "t").unwrap();
        let table = render_table(&rows);
        let line = table.lines().nth(2).unwrap();
        let cells: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cells, ["Original", "95.2", "28.11", "69.97", "0.2277", "0.7575"]);
    }

    #[test]
    fn malformed_results_name_line_and_column() {
        let err = parse_results("condition,acc,is_mean,is_std,fid,ssim,cs\na,0.5,1,0,x,0.1,0.2\n", "r.csv")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains("fid"), "{err}");
        assert!(parse_results("cond,acc\n", "r.csv").unwrap_err().to_string().contains("line 1"));
        let rows = parse_results("condition,acc,is_mean,is_std,fid,ssim,cs\nb,FAILED,,,,,\n", "r").unwrap();
        assert!(rows[0].failed);
        assert!(render_table(&rows).contains("FAILED"));
    }

    #[test]
    fn bar_chart_has_one_bar_per_value() {
        let img = bar_chart(&[Some(1.0)]);
        assert_eq!(img.width(), 80);
        let img = bar_chart(&[Some(1.0), Some(0.5), None]);
        assert_eq!(img.width(), 20 + 3 * 60);
        // Tallest bar reaches the top margin; the half bar does not.
        assert_eq!(*img.get_pixel(30, 21), Rgb([60, 100, 200]));
        assert_eq!(*img.get_pixel(90, 21), Rgb([255, 255, 255]));
    }
}
