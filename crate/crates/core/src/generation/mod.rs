//! Image reconstruction from EEG embeddings.
//!
//! A diffusion backend is conditioned on both encoder outputs at once: the
//! text-space prediction feeds the text cross-attention branch and the
//! image-space prediction, projected to a few tokens, feeds the λ-weighted
//! image branch. The toy backend in [`toy`] runs everywhere; the pretrained
//! latent-diffusion backend is an optional adapter (see [`RealAdapter`]).

pub mod attention;
pub mod toy;

use std::collections::BTreeMap;
use std::env;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use attention::{
    decoupled_backward, decoupled_cross_attention, decoupled_forward, project_image_embedding, scaled_attention,
    AttentionGrads,
};
pub use toy::{
    train_toy_backend, NoiseSchedule, ToyBackend, ToyDenoiser, ToyDenoiserConfig, ToyTrainConfig, ToyTrainOutcome,
    ToyTrainingItem,
};

use crate::container::{content_hash, Container};
use crate::error::{Error, Result};
use crate::numeric::{string_key, substream};

/// Environment variable naming the directory with pretrained weights for the
/// real backend.
pub const WEIGHTS_DIR_ENV: &str = "EEG2IMG_WEIGHTS_DIR";

pub const DEFAULT_INFERENCE_STEPS: usize = 25;

/// Where a bundle's embeddings came from, carried into provenance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleOrigin {
    pub recording_id: Option<String>,
    /// Content hashes of the encoder checkpoints, keyed by target space.
    pub encoder_checkpoints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub text_tokens: Array2<f32>,
    pub image_embedding: Array1<f32>,
    pub image_scale: f32,
    pub drop_text: bool,
    pub drop_image: bool,
    pub origin: BundleOrigin,
}

impl ConditioningBundle {
    pub fn new(text_tokens: Array2<f32>, image_embedding: Array1<f32>) -> Self {
        ConditioningBundle {
            text_tokens,
            image_embedding,
            image_scale: 1.0,
            drop_text: false,
            drop_image: false,
            origin: BundleOrigin::default(),
        }
    }

    /// λ as seen by the attention layers: zero when the image branch is dropped.
    pub fn effective_scale(&self) -> f32 {
        if self.drop_image {
            0.0
        } else {
            self.image_scale
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    RealAdapter,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Toy => "toy",
            BackendKind::RealAdapter => "real_adapter",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackendKind::Toy),
            "real_adapter" | "real-adapter" | "real" => Ok(BackendKind::RealAdapter),
            other => Err(Error::Config(format!("unknown backend kind {other:?} (expected toy or real_adapter)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub inference_steps: usize,
    pub sampler: String,
    pub image_size: usize,
    pub seed: u64,
}

impl BackendConfig {
    pub fn toy(seed: u64) -> Self {
        BackendConfig {
            kind: BackendKind::Toy,
            inference_steps: DEFAULT_INFERENCE_STEPS,
            sampler: "ancestral".into(),
            image_size: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inference_steps == 0 {
            return Err(Error::Config("inference_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub recording_id: Option<String>,
    pub encoder_checkpoints: BTreeMap<String, String>,
    pub backend: BackendConfig,
    pub backend_id: String,
    pub image_scale: f32,
    pub drop_text: bool,
    pub drop_image: bool,
    /// Seed of this image's noise stream.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// `[h, w, 3]`, values in [0, 1].
    pub image: Array3<f32>,
    pub provenance: Provenance,
}

pub trait DiffusionBackend: Send + Sync {
    /// Identifies the backend weights, e.g. a checkpoint hash.
    fn id(&self) -> String;
    fn kind(&self) -> BackendKind;
    fn image_size(&self) -> usize;
    fn sample(&self, bundle: &ConditioningBundle, steps: usize, seed: u64) -> Result<Array3<f32>>;
}

/// Toy backend together with the hash of the checkpoint it came from.
#[derive(Debug, Clone)]
pub struct LoadedToyBackend {
    pub backend: ToyBackend,
    pub hash: String,
}

impl DiffusionBackend for LoadedToyBackend {
    fn id(&self) -> String {
        format!("toy:{}", &self.hash[..12.min(self.hash.len())])
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Toy
    }

    fn image_size(&self) -> usize {
        self.backend.denoiser.config.image_size
    }

    fn sample(&self, bundle: &ConditioningBundle, steps: usize, seed: u64) -> Result<Array3<f32>> {
        self.backend.sample(bundle, steps, seed)
    }
}

/// Renders one image. Pure in `(backend, bundle, config)`.
pub fn generate(backend: &dyn DiffusionBackend, bundle: &ConditioningBundle, config: &BackendConfig) -> Result<GenerationResult> {
    config.validate()?;
    if config.kind != backend.kind() {
        return Err(Error::Config(format!(
            "backend config asks for {} but the loaded backend is {}",
            config.kind,
            backend.kind()
        )));
    }
    if config.image_size != backend.image_size() {
        return Err(Error::Config(format!(
            "backend config image size {} differs from the backend's {}",
            config.image_size,
            backend.image_size()
        )));
    }
    let image = backend.sample(bundle, config.inference_steps, config.seed)?;
    Ok(GenerationResult {
        image,
        provenance: Provenance {
            recording_id: bundle.origin.recording_id.clone(),
            encoder_checkpoints: bundle.origin.encoder_checkpoints.clone(),
            backend: config.clone(),
            backend_id: backend.id(),
            image_scale: bundle.image_scale,
            drop_text: bundle.drop_text,
            drop_image: bundle.drop_image,
            seed: config.seed,
        },
    })
}

/// Per-item seed derived from a run seed and an item id, so that an image
/// does not depend on which other items are generated alongside it.
pub fn item_seed(seed: u64, item: &str) -> u64 {
    substream(seed, string_key(item)).next_u64()
}

/// Generates one image per `(id, bundle)` in parallel; results keep input order.
pub fn generate_many(
    backend: &dyn DiffusionBackend,
    items: &[(String, ConditioningBundle)],
    config: &BackendConfig,
) -> Vec<Result<GenerationResult>> {
    items
        .par_iter()
        .map(|(id, bundle)| {
            let per_item = BackendConfig {
                seed: item_seed(config.seed, id),
                ..config.clone()
            };
            generate(backend, bundle, &per_item)
        })
        .collect()
}

pub const TOY_CHECKPOINT_KIND: &str = "toy-diffusion";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCheckpointHeader {
    pub kind: String,
    pub denoiser: ToyDenoiserConfig,
    pub schedule: NoiseSchedule,
    pub train: ToyTrainConfig,
    pub text_extractor_id: String,
    pub image_extractor_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCheckpoint {
    pub header: ToyCheckpointHeader,
    /// Denoiser parameters followed by the null-text grid.
    pub payload: Vec<f32>,
}

impl ToyCheckpoint {
    pub fn from_backend(backend: &ToyBackend, train: &ToyTrainConfig, text_extractor_id: &str, image_extractor_id: &str) -> Self {
        let mut payload = backend.denoiser.to_flat();
        payload.extend(backend.null_text.iter().copied());
        ToyCheckpoint {
            header: ToyCheckpointHeader {
                kind: TOY_CHECKPOINT_KIND.into(),
                denoiser: backend.denoiser.config.clone(),
                schedule: backend.schedule.clone(),
                train: train.clone(),
                text_extractor_id: text_extractor_id.into(),
                image_extractor_id: image_extractor_id.into(),
            },
            payload,
        }
    }

    pub fn to_backend(&self) -> Result<LoadedToyBackend> {
        let c = &self.header.denoiser;
        let null_len = c.text_tokens * c.text_dim;
        if self.payload.len() < null_len {
            return Err(Error::Shape("toy checkpoint payload is too short".into()));
        }
        let split = self.payload.len() - null_len;
        let denoiser = ToyDenoiser::from_flat(c.clone(), &self.payload[..split])?;
        let null_text = Array2::from_shape_vec((c.text_tokens, c.text_dim), self.payload[split..].to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(LoadedToyBackend {
            backend: ToyBackend {
                denoiser,
                schedule: self.header.schedule.clone(),
                null_text,
            },
            hash: self.content_hash(),
        })
    }

    pub fn content_hash(&self) -> String {
        content_hash(&self.header, &self.payload)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        Container::new(self.header.clone(), self.payload.clone()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Container<ToyCheckpointHeader> = Container::load(path)?;
        if c.header.kind != TOY_CHECKPOINT_KIND {
            return Err(Error::parse(
                path.display().to_string(),
                format!("not a toy diffusion checkpoint (kind {})", c.header.kind),
            ));
        }
        Ok(ToyCheckpoint {
            header: c.header,
            payload: c.payload,
        })
    }
}

/// Adapter for a pretrained latent-diffusion model with an image-prompt
/// adapter.
///
/// Contract: inputs are the text token grid, the global image embedding, λ,
/// the number of inference steps and a seed; the output is an RGB image in
/// [0, 1]. The weights live under the directory named by
/// [`WEIGHTS_DIR_ENV`]. This build carries no inference runtime for them, so
/// opening the adapter always reports the backend as unavailable instead of
/// silently substituting another model.
#[derive(Debug)]
pub struct RealAdapter {
    _private: (),
}

impl RealAdapter {
    pub fn open(weights_dir: Option<&Path>) -> Result<Self> {
        let dir: Option<PathBuf> = weights_dir
            .map(Path::to_path_buf)
            .or_else(|| env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from));
        match dir {
            None => Err(Error::Unavailable(format!(
                "the real diffusion backend needs pretrained weights; set {WEIGHTS_DIR_ENV} or use --backend toy"
            ))),
            Some(d) if !d.is_dir() => Err(Error::Unavailable(format!(
                "weights directory {} does not exist",
                d.display()
            ))),
            Some(d) => Err(Error::Unavailable(format!(
                "found weights in {} but this build has no latent-diffusion runtime; use --backend toy",
                d.display()
            ))),
        }
    }
}
