//! Domain types, manifests and the on-disk formats they are stored in.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::container::sha256_hex;
use crate::dataset::PreprocessConfig;
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const RUN_MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const SIGNAL_SCHEMA_VERSION: u32 = 1;
const SIGNAL_MAGIC: &[u8; 4] = b"EEGR";

/// One EEG trial: a channels x timesteps matrix plus identity.
#[derive(Debug, Clone, PartialEq)]
pub struct EegRecording {
    pub recording_id: String,
    pub subject_id: u32,
    pub class_id: usize,
    pub stimulus_id: String,
    pub signal: Array2<f32>,
}

impl EegRecording {
    pub fn new(
        recording_id: impl Into<String>,
        subject_id: u32,
        class_id: usize,
        stimulus_id: impl Into<String>,
        signal: Array2<f32>,
    ) -> Result<Self> {
        let recording_id = recording_id.into();
        let (c, t) = signal.dim();
        if c == 0 || t == 0 {
            return Err(Error::Shape(format!(
                "recording {recording_id}: signal must have at least one channel and timestep, got {c}x{t}"
            )));
        }
        if !signal.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("signal of recording {recording_id}"),
            });
        }
        Ok(EegRecording {
            recording_id,
            subject_id,
            class_id,
            stimulus_id: stimulus_id.into(),
            signal,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.signal.nrows()
    }

    pub fn n_timesteps(&self) -> usize {
        self.signal.ncols()
    }
}

/// RGB image with values in [0, 1], stored as `[height, width, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusImage {
    pub stimulus_id: String,
    pub class_id: usize,
    pub pixels: Array3<f32>,
}

impl StimulusImage {
    pub fn new(stimulus_id: impl Into<String>, class_id: usize, pixels: Array3<f32>) -> Result<Self> {
        let stimulus_id = stimulus_id.into();
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "stimulus {stimulus_id}: expected [h, w, 3] with h, w >= 1, got [{h}, {w}, {c}]"
            )));
        }
        if !pixels.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Shape(format!("stimulus {stimulus_id}: pixel values outside [0, 1]")));
        }
        Ok(StimulusImage {
            stimulus_id,
            class_id,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    LabelTemplate,
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub source: CaptionSource,
    pub stimulus_id: Option<String>,
    pub class_id: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Image,
    Text,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Space::Image => f.write_str("image"),
            Space::Text => f.write_str("text"),
        }
    }
}

impl std::str::FromStr for Space {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Space::Image),
            "text" => Ok(Space::Text),
            other => Err(Error::Config(format!("unknown space {other:?} (expected image or text)"))),
        }
    }
}

/// Shape of an embedding: a single vector (image space) or a token grid
/// (text space).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingShape {
    Vector { dim: usize },
    Grid { tokens: usize, dim: usize },
}

impl EmbeddingShape {
    pub fn len(&self) -> usize {
        match *self {
            EmbeddingShape::Vector { dim } => dim,
            EmbeddingShape::Grid { tokens, dim } => tokens * dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            EmbeddingShape::Vector { dim } => vec![dim],
            EmbeddingShape::Grid { tokens, dim } => vec![tokens, dim],
        }
    }
}

impl fmt::Display for EmbeddingShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingShape::Vector { dim } => write!(f, "[{dim}]"),
            EmbeddingShape::Grid { tokens, dim } => write!(f, "[{tokens} x {dim}]"),
        }
    }
}

/// A frozen target embedding. Values are stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTarget {
    pub space: Space,
    pub shape: EmbeddingShape,
    pub values: Array1<f32>,
    pub extractor_id: String,
}

impl AlignmentTarget {
    pub fn new(space: Space, shape: EmbeddingShape, values: Array1<f32>, extractor_id: impl Into<String>) -> Result<Self> {
        match (space, shape) {
            (Space::Image, EmbeddingShape::Vector { .. }) | (Space::Text, EmbeddingShape::Grid { .. }) => {}
            // Pooled text targets are vectors.
            (Space::Text, EmbeddingShape::Vector { .. }) => {}
            (Space::Image, EmbeddingShape::Grid { .. }) => {
                return Err(Error::Shape("image-space targets must be vectors".into()));
            }
        }
        if values.len() != shape.len() {
            return Err(Error::Shape(format!(
                "target has {} values but shape {shape} needs {}",
                values.len(),
                shape.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "alignment target".into(),
            });
        }
        Ok(AlignmentTarget {
            space,
            shape,
            values,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn as_grid(&self) -> Array2<f32> {
        let (rows, cols) = match self.shape {
            EmbeddingShape::Vector { dim } => (1, dim),
            EmbeddingShape::Grid { tokens, dim } => (tokens, dim),
        };
        Array2::from_shape_vec((rows, cols), self.values.to_vec()).expect("shape checked at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn ids_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn split_of(&self, recording_id: &str) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|s| self.ids(*s).iter().any(|id| id == recording_id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub recording_id: String,
    pub stimulus_id: String,
    pub class_id: usize,
    pub subject_id: u32,
    /// Relative to the manifest's directory.
    pub signal_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusEntry {
    pub stimulus_id: String,
    pub class_id: usize,
    pub image_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub dataset_id: String,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub n_channels: usize,
    pub n_timesteps: usize,
    pub recordings: Vec<RecordingEntry>,
    pub stimuli: Vec<StimulusEntry>,
    #[serde(default)]
    pub splits: Option<Splits>,
    /// space name -> cache file path, relative to the manifest directory.
    #[serde(default)]
    pub target_caches: BTreeMap<String, String>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
}

impl DatasetManifest {
    pub fn recording(&self, id: &str) -> Option<&RecordingEntry> {
        self.recordings.iter().find(|r| r.recording_id == id)
    }

    pub fn stimulus(&self, id: &str) -> Option<&StimulusEntry> {
        self.stimuli.iter().find(|s| s.stimulus_id == id)
    }

    pub fn split_ids(&self, split: Split) -> Result<&[String]> {
        self.splits
            .as_ref()
            .map(|s| s.ids(split))
            .ok_or_else(|| Error::Dataset(format!("dataset {} has no splits; run make_splits first", self.dataset_id)))
    }

    pub fn subjects(&self) -> BTreeSet<u32> {
        self.recordings.iter().map(|r| r.subject_id).collect()
    }

    /// Stable hash over the manifest's JSON encoding.
    pub fn content_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).unwrap_or_default())
    }
}

/// Checks every manifest invariant and returns one message per violation.
pub fn validate_manifest(m: &DatasetManifest) -> Vec<String> {
    let mut v = Vec::new();
    if m.n_classes == 0 {
        v.push("n_classes must be at least 1".to_string());
    }
    if m.class_names.len() != m.n_classes {
        v.push(format!(
            "n_classes is {} but {} class names are given",
            m.n_classes,
            m.class_names.len()
        ));
    }
    if m.n_channels == 0 || m.n_timesteps == 0 {
        v.push(format!(
            "signal shape must be at least 1x1, got {}x{}",
            m.n_channels, m.n_timesteps
        ));
    }

    let mut stimuli = BTreeMap::new();
    for s in &m.stimuli {
        if s.class_id >= m.n_classes {
            v.push(format!(
                "stimulus {} has class_id {} outside [0, {})",
                s.stimulus_id, s.class_id, m.n_classes
            ));
        }
        if stimuli.insert(s.stimulus_id.as_str(), s).is_some() {
            v.push(format!("stimulus {} listed more than once", s.stimulus_id));
        }
    }

    let mut recordings = BTreeSet::new();
    for r in &m.recordings {
        if r.recording_id.is_empty() {
            v.push("recording with empty recording_id".to_string());
        }
        if !recordings.insert(r.recording_id.as_str()) {
            v.push(format!("recording {} listed more than once", r.recording_id));
        }
        if r.class_id >= m.n_classes {
            v.push(format!(
                "recording {} has class_id {} outside [0, {})",
                r.recording_id, r.class_id, m.n_classes
            ));
        }
        match stimuli.get(r.stimulus_id.as_str()) {
            None => v.push(format!(
                "recording {} references unknown stimulus {}",
                r.recording_id, r.stimulus_id
            )),
            Some(s) if s.class_id != r.class_id => v.push(format!(
                "recording {} has class_id {} but its stimulus {} has class_id {}",
                r.recording_id, r.class_id, s.stimulus_id, s.class_id
            )),
            Some(_) => {}
        }
    }

    if let Some(splits) = &m.splits {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in splits.ids(split) {
                if !recordings.contains(id.as_str()) {
                    v.push(format!("split {split} lists unknown recording {id}"));
                    continue;
                }
                match seen.get(id.as_str()) {
                    Some(prev) if *prev == split => v.push(format!("recording {id} listed twice in {split}")),
                    Some(prev) => v.push(format!("recording {id} in {prev} and {split}")),
                    None => {
                        seen.insert(id.as_str(), split);
                    }
                }
            }
        }
        for r in &m.recordings {
            if !seen.contains_key(r.recording_id.as_str()) {
                v.push(format!("recording {} is not assigned to any split", r.recording_id));
            }
        }
    }
    v
}

fn check_schema_version(value: &serde_json::Value, what: &str, supported: u32) -> Result<()> {
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::parse(what, "missing schema_version field"))?;
    if found != supported as u64 {
        return Err(Error::SchemaVersion {
            what: what.to_string(),
            found: found as u32,
            supported,
        });
    }
    Ok(())
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path.display().to_string(), e))?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_versioned_json<T: serde::de::DeserializeOwned>(path: &Path, supported: u32) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(&what, e))?;
    check_schema_version(&value, &what, supported)?;
    serde_json::from_value(value).map_err(|e| Error::parse(&what, e))
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    write_json_file(path, manifest)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    read_versioned_json(path, MANIFEST_SCHEMA_VERSION)
}

/// Record of one command invocation, sufficient to re-run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    /// Named artifacts (checkpoints, caches, outputs) and their content hashes.
    pub checkpoints: BTreeMap<String, String>,
    pub created_at: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        let canonical = serde_json::to_vec(&config).unwrap_or_default();
        let config_hash = sha256_hex(&canonical);
        RunManifest {
            schema_version: RUN_MANIFEST_SCHEMA_VERSION,
            run_id: format!("{command}-{}", &config_hash[..12]),
            command: command.to_string(),
            config,
            config_hash,
            seed,
            checkpoints: BTreeMap::new(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_file(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_versioned_json(path, RUN_MANIFEST_SCHEMA_VERSION)
    }
}

/// Writes a signal file: 16-byte header then row-major little-endian f32.
pub fn write_signal(path: &Path, signal: &Array2<f32>) -> Result<()> {
    let (c, t) = signal.dim();
    let mut bytes = Vec::with_capacity(16 + c * t * 4);
    bytes.extend_from_slice(SIGNAL_MAGIC);
    bytes.extend_from_slice(&SIGNAL_SCHEMA_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(c as u32).to_le_bytes());
    bytes.extend_from_slice(&(t as u32).to_le_bytes());
    for v in signal.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_signal(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_signal(&bytes, &path.display().to_string())
}

pub fn decode_signal(bytes: &[u8], what: &str) -> Result<Array2<f32>> {
    if bytes.len() < 16 {
        return Err(Error::parse(what, "signal file shorter than its header"));
    }
    if &bytes[..4] != SIGNAL_MAGIC {
        return Err(Error::parse(what, "bad signal magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != SIGNAL_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            what: what.to_string(),
            found: version,
            supported: SIGNAL_SCHEMA_VERSION,
        });
    }
    let (c, t) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + c * t * 4 {
        return Err(Error::parse(
            what,
            format!("expected {} payload bytes for {c}x{t}, found {}", c * t * 4, bytes.len() - 16),
        ));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((c, t), values).expect("length checked"))
}

pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// 8-bit quantization used for every PNG written by the pipeline.
pub fn quantize_pixels(pixels: &Array3<f32>) -> Array3<f32> {
    pixels.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub fn save_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Resolves a manifest-relative path.
pub fn resolve(root: &Path, relative: &str) -> PathBuf {
    let p = Path::new(relative);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn toy_manifest() -> DatasetManifest {
        let n_classes = 40;
        let class_names = (0..n_classes).map(|c| format!("class {c}")).collect();
        let stimuli = (0..n_classes)
            .map(|c| StimulusEntry {
                stimulus_id: format!("s{c}"),
                class_id: c,
                image_path: format!("stimuli/s{c}.png"),
            })
            .collect();
        let recordings: Vec<RecordingEntry> = (0..n_classes)
            .map(|c| RecordingEntry {
                recording_id: format!("r{c}"),
                stimulus_id: format!("s{c}"),
                class_id: c,
                subject_id: (c % 6) as u32 + 1,
                signal_path: format!("signals/r{c}.eegr"),
            })
            .collect();
        let splits = Splits {
            train: recordings[..30].iter().map(|r| r.recording_id.clone()).collect(),
            val: recordings[30..35].iter().map(|r| r.recording_id.clone()).collect(),
            test: recordings[35..].iter().map(|r| r.recording_id.clone()).collect(),
        };
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            dataset_id: "toy".into(),
            n_classes,
            class_names,
            n_channels: 128,
            n_timesteps: 32,
            recordings,
            stimuli,
            splits: Some(splits),
            target_caches: BTreeMap::new(),
            preprocess: PreprocessConfig::default(),
        }
    }

    #[test]
    fn well_formed_manifest_has_no_violations() {
        assert!(validate_manifest(&toy_manifest()).is_empty());
    }

    #[test]
    fn recording_in_two_splits_is_reported_once() {
        let mut m = toy_manifest();
        m.splits.as_mut().unwrap().test.push("r7".into());
        assert_eq!(validate_manifest(&m), vec!["recording r7 in train and test".to_string()]);
    }

    #[test]
    fn out_of_range_class_is_named() {
        let mut m = toy_manifest();
        m.recordings[3].class_id = 41;
        m.stimuli[3].class_id = 41;
        let v = validate_manifest(&m);
        assert!(v.iter().any(|s| s.contains("41")), "{v:?}");
        assert!(v.iter().all(|s| s.contains("41")), "{v:?}");
    }

    #[test]
    fn manifest_roundtrip_and_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = toy_manifest();
        save_manifest(&path, &m).unwrap();
        let first = fs::read(&path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, m);
        save_manifest(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);

        let text = String::from_utf8(first.clone()).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Parse { .. })));

        fs::write(&path, text.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1)).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::SchemaVersion { found: 2, .. })));

        assert!(matches!(load_manifest(&dir.path().join("missing.json")), Err(Error::Io { .. })));
    }

    #[test]
    fn run_manifest_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut r = RunManifest::new("train", serde_json::json!({"lr": 3e-4, "epochs": 5}), Some(7));
        r.checkpoints.insert("encoder".into(), "abc".into());
        r.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back, r);
        back.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    proptest! {
        #[test]
        fn signal_file_roundtrip_is_bit_exact(c in 1usize..5, t in 1usize..9, seed in any::<u64>()) {
            let mut s = seed;
            let signal = Array2::from_shape_fn((c, t), |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((s >> 33) as u32 & 0x7f7f_ffff)
            });
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.eegr");
            write_signal(&path, &signal).unwrap();
            let back = read_signal(&path).unwrap();
            let a: Vec<u32> = signal.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn signal_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.eegr");
        write_signal(&path, &Array2::from_elem((2, 3), 1.5f32)).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"EEGR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 16 + 24);
        assert!(decode_signal(&bytes[..20], "x").is_err());
    }

    #[test]
    fn recording_rejects_nan_and_empty() {
        assert!(EegRecording::new("r", 1, 0, "s", Array2::zeros((0, 4))).is_err());
        let mut s = Array2::zeros((2, 2));
        s[[1, 1]] = f32::NAN;
        assert!(EegRecording::new("r", 1, 0, "s", s).is_err());
    }
}
