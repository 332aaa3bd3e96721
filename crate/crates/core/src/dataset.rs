//! Dataset ingestion, preprocessing, stimulus-level splits and synthetic
//! desk-scale datasets.
//!
//! Raw dataset layout read by [`ingest`]:
//!
//! ```text
//! <root>/labels.csv            recording_id,stimulus_id,class_id,subject_id
//! <root>/classes.txt           optional, one class name per line (line index = class_id)
//! <root>/signals/<recording_id>.eegr
//! <root>/stimuli/<stimulus_id>.png
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    load_manifest, load_png, read_signal, resolve, save_manifest, save_png, validate_manifest, write_signal,
    DatasetManifest, EegRecording, RecordingEntry, Split, Splits, StimulusEntry, StimulusImage,
    MANIFEST_SCHEMA_VERSION,
};
use crate::numeric::{rng_from_seed, string_key, substream};

pub const LABELS_FILE: &str = "labels.csv";
pub const CLASSES_FILE: &str = "classes.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    None,
    #[default]
    PerChannelZscore,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    #[serde(default)]
    pub normalize: Normalize,
    /// Half-open timestep window `[start, end)`.
    #[serde(default)]
    pub crop: Option<(usize, usize)>,
}

impl PreprocessConfig {
    pub fn none() -> Self {
        PreprocessConfig {
            normalize: Normalize::None,
            crop: None,
        }
    }

    pub fn validate(&self, n_timesteps: usize) -> Result<()> {
        if let Some((start, end)) = self.crop {
            if start >= end || end > n_timesteps {
                return Err(Error::Config(format!(
                    "crop [{start}, {end}) must satisfy start < end <= {n_timesteps}"
                )));
            }
        }
        Ok(())
    }

    pub fn output_timesteps(&self, n_timesteps: usize) -> usize {
        self.crop.map_or(n_timesteps, |(s, e)| e - s)
    }
}

/// Applies crop then normalization. Constant channels become all-zero.
pub fn preprocess_signal(signal: &Array2<f32>, config: &PreprocessConfig) -> Result<Array2<f32>> {
    config.validate(signal.ncols())?;
    let mut out = match config.crop {
        Some((s, e)) => signal.slice(ndarray::s![.., s..e]).to_owned(),
        None => signal.clone(),
    };
    if config.normalize == Normalize::PerChannelZscore {
        for mut row in out.axis_iter_mut(Axis(0)) {
            let n = row.len() as f64;
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std <= f64::EPSILON * mean.abs().max(1.0) {
                row.fill(0.0);
            } else {
                row.mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct LabelRow {
    recording_id: String,
    stimulus_id: String,
    class_id: usize,
    subject_id: u32,
}

fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let headers = reader.headers().map_err(|e| Error::parse(path.display().to_string(), e))?.clone();
    let expected = ["recording_id", "stimulus_id", "class_id", "subject_id"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            path.display().to_string(),
            format!("header must be {}", expected.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        let row: LabelRow = row.map_err(|e| Error::parse(format!("{} line {}", path.display(), i + 2), e))?;
        rows.push(row);
    }
    Ok(rows)
}

fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::parse(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_class_names(root: &Path, n_classes: usize) -> Result<Vec<String>> {
    let path = root.join(CLASSES_FILE);
    if !path.exists() {
        return Ok((0..n_classes).map(|c| format!("class_{c}")).collect());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = text.lines().map(str::to_string).collect();
    if names.len() < n_classes {
        return Err(Error::Dataset(format!(
            "{} lists {} classes but labels use {n_classes}",
            path.display(),
            names.len()
        )));
    }
    Ok(names)
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    pub n_recordings: usize,
    pub n_classes: usize,
    pub n_subjects: usize,
    pub n_rejected: usize,
    pub rejected: Vec<String>,
}

/// Reads a raw dataset tree, preprocesses every signal and writes the
/// processed dataset (signals, stimuli, manifest) under `out_dir`.
pub fn ingest(root: &Path, out_dir: &Path, config: &PreprocessConfig) -> Result<IngestReport> {
    if root.canonicalize().ok().is_some_and(|r| out_dir.canonicalize().ok() == Some(r)) {
        return Err(Error::Config("ingest output directory must differ from the raw dataset root".into()));
    }
    let labels_path = root.join(LABELS_FILE);
    if !labels_path.exists() {
        return Err(Error::Dataset(format!("no recordings found under {}", root.display())));
    }
    let mut rows = read_labels(&labels_path)?;
    if rows.is_empty() {
        return Err(Error::Dataset(format!("no recordings found under {}", root.display())));
    }
    rows.sort_by(|a, b| a.recording_id.cmp(&b.recording_id));

    let stimulus_ids: BTreeSet<&str> = rows.iter().map(|r| r.stimulus_id.as_str()).collect();
    let missing: Vec<&str> = stimulus_ids
        .iter()
        .copied()
        .filter(|s| !root.join("stimuli").join(format!("{s}.png")).exists())
        .collect();
    if !missing.is_empty() {
        let offenders: Vec<&str> = rows
            .iter()
            .filter(|r| missing.contains(&r.stimulus_id.as_str()))
            .map(|r| r.recording_id.as_str())
            .collect();
        return Err(Error::Dataset(format!(
            "missing stimulus images {} for recordings {}",
            missing.join(", "),
            offenders.join(", ")
        )));
    }

    let loaded: Vec<Result<Option<Array2<f32>>>> = rows
        .par_iter()
        .map(|r| {
            let signal = read_signal(&root.join("signals").join(format!("{}.eegr", r.recording_id)))?;
            if signal.iter().any(|v| !v.is_finite()) {
                return Ok(None);
            }
            preprocess_signal(&signal, config).map(Some)
        })
        .collect();

    let mut shape = None;
    let mut rejected = Vec::new();
    let mut accepted = Vec::new();
    for (row, signal) in rows.iter().zip(loaded) {
        match signal? {
            None => rejected.push(row.recording_id.clone()),
            Some(s) => {
                match shape {
                    None => shape = Some(s.dim()),
                    Some(d) if d != s.dim() => {
                        return Err(Error::Dataset(format!(
                            "recording {} has shape {:?}, expected {:?}",
                            row.recording_id,
                            s.dim(),
                            d
                        )))
                    }
                    Some(_) => {}
                }
                accepted.push((row, s));
            }
        }
    }
    if !rejected.is_empty() {
        warn!("rejected {} recordings with non-finite samples", rejected.len());
    }
    let (n_channels, n_timesteps) =
        shape.ok_or_else(|| Error::Dataset("no recordings left after rejecting non-finite signals".into()))?;

    let n_classes = rows.iter().map(|r| r.class_id).max().unwrap_or(0) + 1;
    let class_names = read_class_names(root, n_classes)?;
    let n_classes = class_names.len().max(n_classes);

    fs::create_dir_all(out_dir.join("signals")).map_err(|e| Error::io(out_dir, e))?;
    fs::create_dir_all(out_dir.join("stimuli")).map_err(|e| Error::io(out_dir, e))?;
    accepted
        .par_iter()
        .map(|(row, s)| write_signal(&out_dir.join("signals").join(format!("{}.eegr", row.recording_id)), s))
        .collect::<Result<Vec<()>>>()?;

    let mut stimuli: BTreeMap<String, usize> = BTreeMap::new();
    for (row, _) in &accepted {
        if let Some(prev) = stimuli.insert(row.stimulus_id.clone(), row.class_id) {
            if prev != row.class_id {
                return Err(Error::Dataset(format!(
                    "stimulus {} labelled with classes {prev} and {}",
                    row.stimulus_id, row.class_id
                )));
            }
        }
    }
    for id in stimuli.keys() {
        let name = format!("{id}.png");
        let from = root.join("stimuli").join(&name);
        let to = out_dir.join("stimuli").join(&name);
        fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
    }

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        dataset_id: root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        n_classes,
        class_names,
        n_channels,
        n_timesteps,
        recordings: accepted
            .iter()
            .map(|(r, _)| RecordingEntry {
                recording_id: r.recording_id.clone(),
                stimulus_id: r.stimulus_id.clone(),
                class_id: r.class_id,
                subject_id: r.subject_id,
                signal_path: format!("signals/{}.eegr", r.recording_id),
            })
            .collect(),
        stimuli: stimuli
            .iter()
            .map(|(id, &class_id)| StimulusEntry {
                stimulus_id: id.clone(),
                class_id,
                image_path: format!("stimuli/{id}.png"),
            })
            .collect(),
        splits: None,
        target_caches: BTreeMap::new(),
        preprocess: config.clone(),
    };
    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    save_manifest(&out_dir.join(MANIFEST_FILE), &manifest)?;
    let report = IngestReport {
        n_recordings: manifest.recordings.len(),
        n_classes: manifest.n_classes,
        n_subjects: manifest.subjects().len(),
        n_rejected: rejected.len(),
        rejected,
        manifest,
    };
    info!(
        "ingested {} recordings, {} classes, {} subjects ({} rejected)",
        report.n_recordings, report.n_classes, report.n_subjects, report.n_rejected
    );
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.as_array();
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("split fractions must be non-negative, got {f:?}")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier split.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Stratified, stimulus-level split. All recordings of one stimulus share a
/// split; deterministic in `seed`.
pub fn make_splits(manifest: &DatasetManifest, fractions: SplitFractions, seed: u64) -> Result<DatasetManifest> {
    fractions.validate()?;
    let f = fractions.as_array();
    let requested = f.iter().filter(|v| **v > 0.0).count();
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for s in &manifest.stimuli {
        by_class.entry(s.class_id).or_default().push(&s.stimulus_id);
    }
    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    let splits = [Split::Train, Split::Val, Split::Test];
    for (&class_id, stimuli) in by_class.iter_mut() {
        if stimuli.len() < requested {
            let name = manifest.class_names.get(class_id).map(String::as_str).unwrap_or("?");
            return Err(Error::Dataset(format!(
                "class {class_id} ({name}) has {} stimuli but {requested} splits were requested",
                stimuli.len()
            )));
        }
        stimuli.sort_unstable();
        let mut rng = substream(seed, class_id as u64);
        stimuli.shuffle(&mut rng);
        let counts = apportion(stimuli.len(), f);
        let mut it = stimuli.iter();
        for (split, count) in splits.iter().zip(counts) {
            for s in it.by_ref().take(count) {
                assignment.insert(s, *split);
            }
        }
    }
    let mut out = Splits::default();
    let mut recordings: Vec<&RecordingEntry> = manifest.recordings.iter().collect();
    recordings.sort_by(|a, b| a.recording_id.cmp(&b.recording_id));
    for r in recordings {
        let split = assignment
            .get(r.stimulus_id.as_str())
            .ok_or_else(|| Error::Dataset(format!("recording {} has no stimulus entry", r.recording_id)))?;
        out.ids_mut(*split).push(r.recording_id.clone());
    }
    let mut m = manifest.clone();
    m.splits = Some(out);
    Ok(m)
}

/// Desk-scale synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_subjects: usize,
    pub n_channels: usize,
    pub n_timesteps: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Distinct stimulus ids per class; recordings cycle through them.
    #[serde(default = "default_stimuli_per_class")]
    pub stimuli_per_class: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_stimuli_per_class() -> usize {
    10
}

fn default_image_size() -> usize {
    8
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 4,
            n_subjects: 6,
            n_channels: 16,
            n_timesteps: 64,
            samples_per_class: 32,
            noise_sigma: 0.5,
            seed: 0,
            stimuli_per_class: default_stimuli_per_class(),
            image_size: default_image_size(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_classes", self.n_classes),
            ("n_subjects", self.n_subjects),
            ("n_channels", self.n_channels),
            ("n_timesteps", self.n_timesteps),
            ("samples_per_class", self.samples_per_class),
            ("stimuli_per_class", self.stimuli_per_class),
            ("image_size", self.image_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    fn effective_stimuli_per_class(&self) -> usize {
        self.stimuli_per_class.min(self.samples_per_class)
    }
}

const TEMPLATE_SEED: u64 = 0x5eed_7e3a_1a7e_0001;
const SINUSOIDS_PER_CLASS: usize = 3;

/// Noise-free class signal: a sum of class-keyed sinusoids with per-channel
/// amplitudes and phases. Independent of the dataset seed.
pub fn class_template(class_id: usize, n_channels: usize, n_timesteps: usize) -> Array2<f32> {
    let mut rng = rng_from_seed(TEMPLATE_SEED ^ string_key(&format!("class-{class_id}")));
    let mut out = Array2::<f64>::zeros((n_channels, n_timesteps));
    for _ in 0..SINUSOIDS_PER_CLASS {
        let freq: f64 = rng.random_range(1.0..6.0);
        for ch in 0..n_channels {
            let amp: f64 = rng.random_range(0.4..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            for t in 0..n_timesteps {
                let x = std::f64::consts::TAU * freq * t as f64 / n_timesteps as f64 + phase;
                out[[ch, t]] += amp * x.sin();
            }
        }
    }
    out.mapv(|v| v as f32)
}

const SHAPES: [&str; 8] = ["square", "disk", "triangle", "cross", "diamond", "ring", "bar", "column"];

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

fn hue_name(hue: f64) -> String {
    const NAMES: [&str; 12] = [
        "red", "orange", "yellow", "lime", "green", "spring", "cyan", "azure", "blue", "violet", "magenta", "rose",
    ];
    let deg = hue * 360.0;
    let idx = ((deg + 15.0) / 30.0).floor() as usize % 12;
    if (deg - idx as f64 * 30.0).abs() < 1e-9 || (deg - idx as f64 * 30.0 - 360.0).abs() < 1e-9 {
        NAMES[idx].to_string()
    } else {
        format!("{} hue {}", NAMES[idx], deg.round())
    }
}

/// Fill color of a synthetic class.
pub fn class_color(class_id: usize, n_classes: usize) -> [f32; 3] {
    hsv_to_rgb(class_id as f64 / n_classes as f64, 0.9, 0.95)
}

pub fn synthetic_class_names(n_classes: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..n_classes)
        .map(|c| format!("{} {}", hue_name(c as f64 / n_classes as f64), SHAPES[c % SHAPES.len()]))
        .collect();
    let mut seen = BTreeSet::new();
    for (i, n) in names.iter_mut().enumerate() {
        if !seen.insert(n.clone()) {
            *n = format!("{n} {i}");
            seen.insert(n.clone());
        }
    }
    names
}

fn inside_shape(shape: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match shape {
        0 => u.abs() <= 0.6 && v.abs() <= 0.6,
        1 => r <= 0.7,
        2 => v >= -0.6 && v <= 0.7 && u.abs() <= (0.7 - v) * 0.55,
        3 => (u.abs() <= 0.25 && v.abs() <= 0.8) || (v.abs() <= 0.25 && u.abs() <= 0.8),
        4 => u.abs() + v.abs() <= 0.8,
        5 => (0.4..=0.85).contains(&r),
        6 => v.abs() <= 0.3 && u.abs() <= 0.85,
        _ => u.abs() <= 0.3 && v.abs() <= 0.85,
    }
}

/// Class-keyed colored shape on a black background.
pub fn class_image(class_id: usize, n_classes: usize, size: usize) -> Array3<f32> {
    let color = class_color(class_id, n_classes);
    let shape = class_id % SHAPES.len();
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let u = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        let v = 1.0 - (y as f64 + 0.5) / size as f64 * 2.0;
        if inside_shape(shape, u, v) {
            color[c]
        } else {
            0.0
        }
    })
}

/// Writes a raw synthetic dataset tree under `out_dir` (same layout that
/// [`ingest`] reads) and returns its unprocessed manifest, which is also
/// saved as `manifest.json`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let n_stimuli = spec.effective_stimuli_per_class();
    let class_names = synthetic_class_names(spec.n_classes);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let mut rows = Vec::new();
    let mut stimuli = Vec::new();
    for c in 0..spec.n_classes {
        let pixels = class_image(c, spec.n_classes, spec.image_size);
        for s in 0..n_stimuli {
            let id = format!("s{c:03}_{s:03}");
            save_png(&out_dir.join("stimuli").join(format!("{id}.png")), &pixels)?;
            stimuli.push(StimulusEntry {
                stimulus_id: id.clone(),
                class_id: c,
                image_path: format!("stimuli/{id}.png"),
            });
        }
        for j in 0..spec.samples_per_class {
            rows.push(LabelRow {
                recording_id: format!("r{c:03}_{j:04}"),
                stimulus_id: format!("s{c:03}_{:03}", j % n_stimuli),
                class_id: c,
                subject_id: (j % spec.n_subjects) as u32 + 1,
            });
        }
    }

    let templates: Vec<Array2<f32>> = (0..spec.n_classes)
        .map(|c| class_template(c, spec.n_channels, spec.n_timesteps))
        .collect();
    rows.par_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut rng = substream(spec.seed, i as u64);
            let mut signal = templates[row.class_id].clone();
            if spec.noise_sigma > 0.0 {
                signal.mapv_inplace(|v| v + noise.sample(&mut rng) as f32);
            }
            write_signal(&out_dir.join("signals").join(format!("{}.eegr", row.recording_id)), &signal)
        })
        .collect::<Result<Vec<()>>>()?;

    write_labels(&out_dir.join(LABELS_FILE), &rows)?;
    let classes_path = out_dir.join(CLASSES_FILE);
    fs::write(&classes_path, class_names.join("\n") + "\n").map_err(|e| Error::io(&classes_path, e))?;

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        dataset_id: format!("synthetic-c{}-s{}", spec.n_classes, spec.seed),
        n_classes: spec.n_classes,
        class_names,
        n_channels: spec.n_channels,
        n_timesteps: spec.n_timesteps,
        recordings: rows
            .iter()
            .map(|r| RecordingEntry {
                recording_id: r.recording_id.clone(),
                stimulus_id: r.stimulus_id.clone(),
                class_id: r.class_id,
                subject_id: r.subject_id,
                signal_path: format!("signals/{}.eegr", r.recording_id),
            })
            .collect(),
        stimuli,
        splits: None,
        target_caches: BTreeMap::new(),
        preprocess: PreprocessConfig::none(),
    };
    save_manifest(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A manifest together with every signal and stimulus it references.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub recordings: Vec<EegRecording>,
    pub stimuli: BTreeMap<String, StimulusImage>,
    index: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_manifest(manifest, root)
    }

    pub fn from_manifest(manifest: DatasetManifest, root: PathBuf) -> Result<Self> {
        let violations = validate_manifest(&manifest);
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let recordings = manifest
            .recordings
            .par_iter()
            .map(|r| {
                let signal = read_signal(&resolve(&root, &r.signal_path))?;
                if signal.dim() != (manifest.n_channels, manifest.n_timesteps) {
                    return Err(Error::Shape(format!(
                        "recording {} has shape {:?}, manifest says {}x{}",
                        r.recording_id,
                        signal.dim(),
                        manifest.n_channels,
                        manifest.n_timesteps
                    )));
                }
                EegRecording::new(&r.recording_id, r.subject_id, r.class_id, &r.stimulus_id, signal)
            })
            .collect::<Result<Vec<_>>>()?;
        let stimuli = manifest
            .stimuli
            .par_iter()
            .map(|s| {
                let pixels = load_png(&resolve(&root, &s.image_path))?;
                StimulusImage::new(&s.stimulus_id, s.class_id, pixels)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .map(|s| (s.stimulus_id.clone(), s))
            .collect();
        let index = recordings
            .iter()
            .enumerate()
            .map(|(i, r)| (r.recording_id.clone(), i))
            .collect();
        Ok(Dataset {
            manifest,
            root,
            recordings,
            stimuli,
            index,
        })
    }

    pub fn recording(&self, id: &str) -> Option<&EegRecording> {
        self.index.get(id).map(|&i| &self.recordings[i])
    }

    pub fn recordings_in(&self, split: Split) -> Result<Vec<&EegRecording>> {
        self.manifest
            .split_ids(split)?
            .iter()
            .map(|id| {
                self.recording(id)
                    .ok_or_else(|| Error::Dataset(format!("split {split} references unknown recording {id}")))
            })
            .collect()
    }

    pub fn stimulus_of(&self, recording: &EegRecording) -> Result<&StimulusImage> {
        self.stimuli
            .get(&recording.stimulus_id)
            .ok_or_else(|| Error::Dataset(format!("missing stimulus {}", recording.stimulus_id)))
    }

    pub fn class_name(&self, class_id: usize) -> Option<&str> {
        self.manifest.class_names.get(class_id).map(String::as_str)
    }
}
