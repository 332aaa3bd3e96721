//! Alignment training: MSE between encoder outputs and frozen target
//! embeddings, optimized with Adam (decoupled weight decay) and a
//! multiplicative learning-rate schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::{debug, info};
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caption::{CaptionProvider, CaptionQuery};
use crate::container::{content_hash, Container};
use crate::dataset::Dataset;
use crate::embedding::{ImageEmbedder, TextEmbedder};
use crate::encoder::{stack_signals, Encoder, EncoderCheckpoint, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::model::{AlignmentTarget, EegRecording, EmbeddingShape, Space, Split};
use crate::numeric::{cosine_similarity, pairwise_mean, real, substream, Real};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    PerEpoch,
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::lr_lambda")]
    pub lr_lambda: f64,
    #[serde(default)]
    pub lr_decay: LrDecay,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    pub seed: u64,
    pub space: Space,
}

mod defaults {
    pub fn lr() -> f64 {
        3e-4
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn lr_lambda() -> f64 {
        0.999
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
}

impl TrainConfig {
    pub fn new(space: Space, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            lr: defaults::lr(),
            weight_decay: defaults::weight_decay(),
            lr_lambda: defaults::lr_lambda(),
            lr_decay: LrDecay::PerEpoch,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            adam_eps: defaults::adam_eps(),
            seed,
            space,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.lr_lambda > 0.0 && self.lr_lambda <= 1.0) {
            return Err(Error::Config(format!("lr_lambda must be in (0, 1], got {}", self.lr_lambda)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch normalization)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("weight decay or Adam betas out of range".into()));
        }
        Ok(())
    }

    /// Learning rate after `k` decay events.
    pub fn lr_at(&self, k: usize) -> f64 {
        self.lr * self.lr_lambda.powi(k as i32)
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.beta1, c.beta2, c.adam_eps, c.weight_decay)
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>, lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let decay: T = real(1.0 - lr * self.weight_decay);
        let (b1t, b2t): (T, T) = (real(b1), real(b2));
        let (one_b1, one_b2): (T, T) = (real(1.0 - b1), real(1.0 - b2));
        let step: T = real(lr / bc1);
        let bc2_sqrt: T = real(bc2.sqrt());
        let eps: T = real(self.eps);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                p[i] *= decay;
                m[i] = b1t * m[i] + one_b1 * g[i];
                v[i] = b2t * v[i] + one_b2 * g[i] * g[i];
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                p[i] -= step * m[i] / denom;
            }
        }
    }
}

/// Mean of squared differences over all elements.
pub fn mse_loss<T: Real>(pred: ArrayView2<'_, T>, target: ArrayView2<'_, T>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len() as f64;
    let sum: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| {
            let d = (*a - *b).to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Gradient of [`mse_loss`] with respect to `pred`.
pub fn mse_grad<T: Real>(pred: ArrayView2<'_, T>, target: ArrayView2<'_, T>) -> Array2<T> {
    let scale: T = real(2.0 / pred.len() as f64);
    (&pred - &target).mapv(|d| d * scale)
}

/// Where targets come from.
pub enum TargetSource<'a> {
    Image(&'a dyn ImageEmbedder),
    Text {
        embedder: &'a dyn TextEmbedder,
        captions: &'a CaptionProvider,
        /// Mean-pool the token grid into one vector.
        pooled: bool,
    },
}

impl TargetSource<'_> {
    pub fn space(&self) -> Space {
        match self {
            TargetSource::Image(_) => Space::Image,
            TargetSource::Text { .. } => Space::Text,
        }
    }

    pub fn extractor_id(&self) -> String {
        match self {
            TargetSource::Image(e) => e.id(),
            TargetSource::Text { embedder, pooled, .. } => {
                if *pooled {
                    format!("{}:pooled", embedder.id())
                } else {
                    embedder.id()
                }
            }
        }
    }

    pub fn shape(&self) -> EmbeddingShape {
        match self {
            TargetSource::Image(e) => EmbeddingShape::Vector { dim: e.dim() },
            TargetSource::Text { embedder, pooled, .. } => {
                if *pooled {
                    EmbeddingShape::Vector { dim: embedder.dim() }
                } else {
                    embedder.shape()
                }
            }
        }
    }

    /// Key of the provider input a recording maps to; recordings sharing a
    /// key share a target.
    fn key(&self, r: &EegRecording) -> Result<String> {
        match self {
            TargetSource::Image(_) => Ok(r.stimulus_id.clone()),
            TargetSource::Text { captions, .. } => Ok(captions
                .caption_for(CaptionQuery {
                    stimulus_id: Some(&r.stimulus_id),
                    class_id: r.class_id,
                })?
                .text),
        }
    }

    fn compute(&self, dataset: &Dataset, key: &str) -> Result<Array1<f32>> {
        match self {
            TargetSource::Image(e) => {
                let img = dataset
                    .stimuli
                    .get(key)
                    .ok_or_else(|| Error::Dataset(format!("missing stimulus {key}")))?;
                e.embed_image(&img.pixels)
            }
            TargetSource::Text { embedder, pooled, .. } => {
                let grid = embedder.embed_text(key)?;
                Ok(if *pooled {
                    grid.mean_axis(Axis(0)).expect("at least one token")
                } else {
                    Array1::from_iter(grid.iter().copied())
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCacheHeader {
    pub kind: String,
    pub extractor_id: String,
    pub space: Space,
    pub shape: EmbeddingShape,
    pub manifest_hash: String,
    pub complete: bool,
    pub ids: Vec<String>,
}

const CACHE_KIND: &str = "target-cache";

/// Precomputed targets keyed by recording id.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCache {
    pub extractor_id: String,
    pub space: Space,
    pub shape: EmbeddingShape,
    pub manifest_hash: String,
    pub complete: bool,
    pub targets: BTreeMap<String, Array1<f32>>,
}

impl TargetCache {
    fn header(&self) -> TargetCacheHeader {
        TargetCacheHeader {
            kind: CACHE_KIND.into(),
            extractor_id: self.extractor_id.clone(),
            space: self.space,
            shape: self.shape,
            manifest_hash: self.manifest_hash.clone(),
            complete: self.complete,
            ids: self.targets.keys().cloned().collect(),
        }
    }

    fn payload(&self) -> Vec<f32> {
        self.targets.values().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn content_hash(&self) -> String {
        content_hash(&self.header(), &self.payload())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        Container::new(self.header(), self.payload()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Container<TargetCacheHeader> = Container::load(path)?;
        let what = path.display().to_string();
        if c.header.kind != CACHE_KIND {
            return Err(Error::parse(what, "not a target cache"));
        }
        let d = c.header.shape.len();
        if c.payload.len() != d * c.header.ids.len() {
            return Err(Error::parse(what, "payload length does not match ids x shape"));
        }
        let targets = c
            .header
            .ids
            .iter()
            .zip(c.payload.chunks_exact(d.max(1)))
            .map(|(id, chunk)| (id.clone(), Array1::from(chunk.to_vec())))
            .collect();
        Ok(TargetCache {
            extractor_id: c.header.extractor_id,
            space: c.header.space,
            shape: c.header.shape,
            manifest_hash: c.header.manifest_hash,
            complete: c.header.complete,
            targets,
        })
    }

    pub fn get(&self, recording_id: &str) -> Result<&Array1<f32>> {
        self.targets
            .get(recording_id)
            .ok_or_else(|| Error::Dataset(format!("target cache has no entry for recording {recording_id}")))
    }

    pub fn target(&self, recording_id: &str) -> Result<AlignmentTarget> {
        AlignmentTarget::new(self.space, self.shape, self.get(recording_id)?.clone(), &self.extractor_id)
    }

    /// Checks that every recording of the given splits has a target.
    pub fn check_covers(&self, dataset: &Dataset, splits: &[Split]) -> Result<()> {
        let mut missing = Vec::new();
        for split in splits {
            for id in dataset.manifest.split_ids(*split)? {
                if !self.targets.contains_key(id) {
                    missing.push(id.clone());
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Dataset(format!(
                "target cache misses {} recordings (first: {})",
                missing.len(),
                missing[0]
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheBuildStats {
    pub provider_calls: usize,
    pub reused: usize,
}

/// Builds (or resumes) the target cache for every recording of the dataset
/// and persists it at `path`. A complete cache for the same manifest and
/// extractor is returned without calling the provider.
pub fn build_target_cache(
    dataset: &Dataset,
    source: &TargetSource<'_>,
    path: &Path,
) -> Result<(TargetCache, CacheBuildStats)> {
    let manifest_hash = dataset.manifest.content_hash();
    let extractor_id = source.extractor_id();
    let shape = source.shape();
    let mut existing = BTreeMap::new();
    if path.exists() {
        let cache = TargetCache::load(path)?;
        let same = cache.extractor_id == extractor_id
            && cache.manifest_hash == manifest_hash
            && cache.shape == shape
            && cache.space == source.space();
        if same && cache.complete {
            debug!("target cache {} is complete; skipping", path.display());
            let reused = cache.targets.len();
            return Ok((
                cache,
                CacheBuildStats {
                    provider_calls: 0,
                    reused,
                },
            ));
        }
        if same {
            existing = cache.targets;
        }
    }

    let keys: Vec<(String, String)> = dataset
        .recordings
        .iter()
        .map(|r| Ok((r.recording_id.clone(), source.key(r)?)))
        .collect::<Result<_>>()?;
    let needed: BTreeSet<&str> = keys
        .iter()
        .filter(|(id, _)| !existing.contains_key(id))
        .map(|(_, k)| k.as_str())
        .collect();
    let needed: Vec<&str> = needed.into_iter().collect();
    let computed: Vec<(&str, Result<Array1<f32>>)> = needed
        .par_iter()
        .map(|k| {
            let v = source.compute(dataset, k).and_then(|v| {
                if v.len() != shape.len() {
                    Err(Error::Shape(format!("provider returned {} values, expected {}", v.len(), shape.len())))
                } else if !v.iter().all(|x| x.is_finite()) {
                    Err(Error::NonFinite {
                        context: format!("target for {k}"),
                    })
                } else {
                    Ok(v)
                }
            });
            (*k, v)
        })
        .collect();
    let provider_calls = computed.len();

    let mut values: BTreeMap<&str, Array1<f32>> = BTreeMap::new();
    let mut failure = None;
    for (k, v) in computed {
        match v {
            Ok(v) => {
                values.insert(k, v);
            }
            Err(e) if failure.is_none() => failure = Some((k.to_string(), e)),
            Err(_) => {}
        }
    }
    let reused = existing.len();
    let mut targets = existing;
    for (id, key) in &keys {
        if let Some(v) = values.get(key.as_str()) {
            targets.entry(id.clone()).or_insert_with(|| v.clone());
        }
    }
    let complete = failure.is_none() && keys.iter().all(|(id, _)| targets.contains_key(id));
    let cache = TargetCache {
        extractor_id,
        space: source.space(),
        shape,
        manifest_hash,
        complete,
        targets,
    };
    cache.save(path)?;
    if let Some((item, e)) = failure {
        return Err(Error::Provider {
            item,
            message: e.to_string(),
        });
    }
    info!(
        "target cache {}: {} entries, {} provider calls",
        path.display(),
        cache.targets.len(),
        provider_calls
    );
    Ok((
        cache,
        CacheBuildStats {
            provider_calls,
            reused,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::from("epoch,train_mse,val_mse,lr\n");
    for r in history {
        text.push_str(&format!("{},{:e},{:e},{:e}\n", r.epoch, r.train_mse, r.val_mse, r.lr));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint of the epoch with the lowest validation MSE.
    pub checkpoint: EncoderCheckpoint,
    pub best: Encoder<f32>,
    pub last: Encoder<f32>,
    pub history: Vec<EpochRecord>,
}

struct Batches {
    signals: Array3<f32>,
    targets: Array2<f32>,
}

fn gather(recordings: &[&EegRecording], cache: &TargetCache) -> Result<Batches> {
    let views: Vec<_> = recordings.iter().map(|r| r.signal.view()).collect();
    let signals = stack_signals(&views)?;
    let d = cache.shape.len();
    let mut targets = Array2::zeros((recordings.len(), d));
    for (i, r) in recordings.iter().enumerate() {
        targets.row_mut(i).assign(cache.get(&r.recording_id)?);
    }
    Ok(Batches { signals, targets })
}

fn eval_mse(encoder: &Encoder<f32>, data: &Batches) -> Result<f64> {
    if data.signals.dim().0 == 0 {
        return Ok(f64::NAN);
    }
    let pred = encoder.forward_batch(data.signals.view())?;
    mse_loss(pred.view(), data.targets.view())
}

fn select_rows(a: &Array3<f32>, idx: &[usize]) -> Array3<f32> {
    a.select(Axis(0), idx)
}

/// Trains one encoder against one target space.
pub fn train_alignment(
    mut encoder: Encoder<f32>,
    dataset: &Dataset,
    cache: &TargetCache,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if encoder.config.output_shape.len() != cache.shape.len() {
        return Err(Error::Shape(format!(
            "encoder output {} does not match target shape {}",
            encoder.config.output_shape, cache.shape
        )));
    }
    if cache.space != config.space {
        return Err(Error::Config(format!(
            "cache holds {} targets but training space is {}",
            cache.space, config.space
        )));
    }
    cache.check_covers(dataset, &[Split::Train, Split::Val])?;
    let train = gather(&dataset.recordings_in(Split::Train)?, cache)?;
    let val = gather(&dataset.recordings_in(Split::Val)?, cache)?;
    let n = train.signals.dim().0;
    if n < 2 {
        return Err(Error::Dataset("training split needs at least 2 recordings".into()));
    }

    let mut adam = AdamW::<f32>::from_config(config);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Encoder<f32>, usize)> = None;
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        let mut rng = substream(config.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let epoch_lr = config.lr_at(epoch);
        let mut losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = select_rows(&train.signals, chunk);
            let y = train.targets.select(Axis(0), chunk);
            let (pred, fwd) = encoder.forward_with_cache(x.view(), Mode::Train)?;
            let loss = mse_loss(pred.view(), y.view())?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, step {step}"),
                });
            }
            let grads: EncoderParams<f32> = encoder.backward(&fwd, &mse_grad(pred.view(), y.view()));
            let lr = match config.lr_decay {
                LrDecay::PerEpoch => epoch_lr,
                LrDecay::PerStep => config.lr_at(step as usize),
            };
            adam.step(encoder.params.slices_mut(), grads.slices(), lr);
            encoder.update_running_stats(&fwd);
            losses.push(loss);
            step += 1;
        }
        let train_mse = pairwise_mean(&losses);
        let val_mse = eval_mse(&encoder, &val)?;
        let score = if val_mse.is_nan() { train_mse } else { val_mse };
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, encoder.clone(), epoch));
        }
        history.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            lr: epoch_lr,
        });
        debug!("epoch {epoch}: train {train_mse:.5} val {val_mse:.5} lr {epoch_lr:.3e}");
    }
    let (_, best_encoder, best_epoch) = best.expect("at least one epoch");
    let checkpoint = EncoderCheckpoint::from_encoder(&best_encoder, config.space, step, best_epoch, &cache.extractor_id);
    Ok(TrainOutcome {
        checkpoint,
        best: best_encoder,
        last: encoder,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEval {
    pub mse: f64,
    pub retrieval_top1: f64,
    pub n: usize,
}

/// MSE and top-1 cosine retrieval of predictions against their own targets
/// among all targets. A retrieval counts as correct when the nearest target
/// equals the recording's own target (recordings of one stimulus share it).
pub fn evaluate_predictions(preds: &[Array1<f64>], targets: &[Array1<f64>]) -> Result<AlignmentEval> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Shape("predictions and targets must be non-empty and paired".into()));
    }
    let mut sq = Vec::with_capacity(preds.len());
    let mut hits = 0usize;
    for (i, p) in preds.iter().enumerate() {
        if p.len() != targets[i].len() {
            return Err(Error::Shape("prediction and target lengths differ".into()));
        }
        sq.push((p - &targets[i]).mapv(|d| d * d).mean().unwrap_or(0.0));
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, t) in targets.iter().enumerate() {
            let c = cosine_similarity(p.view(), t.view()).unwrap_or(f64::NEG_INFINITY);
            if c > best.0 {
                best = (c, j);
            }
        }
        if best.1 != usize::MAX && targets[best.1] == targets[i] {
            hits += 1;
        }
    }
    Ok(AlignmentEval {
        mse: pairwise_mean(&sq),
        retrieval_top1: hits as f64 / preds.len() as f64,
        n: preds.len(),
    })
}

pub fn eval_alignment(encoder: &Encoder<f32>, dataset: &Dataset, cache: &TargetCache, split: Split) -> Result<AlignmentEval> {
    let recs = dataset.recordings_in(split)?;
    if recs.is_empty() {
        return Err(Error::Dataset(format!("split {split} is empty")));
    }
    let data = gather(&recs, cache)?;
    let pred = encoder.forward_batch(data.signals.view())?;
    let preds: Vec<Array1<f64>> = pred.rows().into_iter().map(|r| r.mapv(f64::from)).collect();
    let targets: Vec<Array1<f64>> = data.targets.rows().into_iter().map(|r| r.mapv(f64::from)).collect();
    evaluate_predictions(&preds, &targets)
}
