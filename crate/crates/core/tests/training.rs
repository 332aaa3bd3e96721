mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use eeg2img::caption::CaptionProvider;
use eeg2img::dataset::{SplitFractions, SyntheticSpec};
use eeg2img::embedding::{ImageEmbedder, StandInImageEmbedder, StandInTextEmbedder};
use eeg2img::encoder::{Encoder, EncoderConfig, Mode};
use eeg2img::model::{EmbeddingShape, Space, Split};
use eeg2img::training::{
    build_target_cache, eval_alignment, mse_grad, mse_loss, train_alignment, AdamW, TargetSource, TrainConfig,
};
use eeg2img::{Error, Result};
use ndarray::{Array1, Array3};

struct Counting<'a> {
    inner: &'a dyn ImageEmbedder,
    calls: AtomicUsize,
    fail_on: Option<usize>,
}

impl ImageEmbedder for Counting<'_> {
    fn id(&self) -> String {
        self.inner.id()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn embed_image(&self, pixels: &Array3<f32>) -> Result<Array1<f32>> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_on == Some(n) {
            return Err(Error::Unavailable("simulated provider outage".into()));
        }
        self.inner.embed_image(pixels)
    }
}

fn overfit_dataset(dir: &std::path::Path) -> eeg2img::dataset::Dataset {
    let spec = SyntheticSpec {
        n_classes: 2,
        n_subjects: 1,
        n_channels: 4,
        n_timesteps: 12,
        samples_per_class: 4,
        noise_sigma: 0.5,
        seed: 3,
        stimuli_per_class: 4,
        image_size: 8,
    };
    let all_train = SplitFractions {
        train: 1.0,
        val: 0.0,
        test: 0.0,
    };
    common::synthetic_dataset(dir, &spec, all_train, 0)
}

fn tiny_encoder(out: usize, seed: u64) -> Encoder<f32> {
    let cfg = EncoderConfig {
        rnn_layers: 1,
        hidden_dim: 16,
        head_hidden_dim: 16,
        ..EncoderConfig::new(4, 12, EmbeddingShape::Vector { dim: out })
    };
    Encoder::new(cfg, seed).unwrap()
}

#[test]
fn image_cache_shape_purity_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        seed: 1,
        ..SyntheticSpec::default()
    };
    let ds = common::synthetic_dataset(dir.path(), &spec, SplitFractions::default(), 0);
    let base = StandInImageEmbedder::new(32, 9);
    let counting = Counting {
        inner: &base,
        calls: AtomicUsize::new(0),
        fail_on: None,
    };
    let path = dir.path().join("image.cache");
    let (cache, stats) = build_target_cache(&ds, &TargetSource::Image(&counting), &path).unwrap();
    assert_eq!(cache.targets.len(), 128);
    assert!(cache.targets.values().all(|v| v.len() == 32));
    assert!(cache.complete);
    // One call per distinct stimulus.
    assert_eq!(stats.provider_calls, ds.manifest.stimuli.len());

    let same_stimulus: Vec<_> = ds.recordings.iter().filter(|r| r.stimulus_id == ds.recordings[0].stimulus_id).collect();
    assert!(same_stimulus.len() > 1);
    for r in &same_stimulus {
        assert_eq!(cache.get(&r.recording_id).unwrap(), cache.get(&same_stimulus[0].recording_id).unwrap());
    }

    counting.calls.store(0, Ordering::SeqCst);
    let (again, stats) = build_target_cache(&ds, &TargetSource::Image(&counting), &path).unwrap();
    assert_eq!(stats.provider_calls, 0);
    assert_eq!(counting.calls.load(Ordering::SeqCst), 0);
    assert_eq!(again, cache);
}

#[test]
fn failed_cache_build_is_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let ds = overfit_dataset(dir.path());
    let base = StandInImageEmbedder::new(8, 9);
    let path = dir.path().join("image.cache");
    let failing = Counting {
        inner: &base,
        calls: AtomicUsize::new(0),
        fail_on: Some(0),
    };
    let err = build_target_cache(&ds, &TargetSource::Image(&failing), &path).unwrap_err();
    assert!(matches!(err, Error::Provider { .. }), "{err}");
    let partial = eeg2img::training::TargetCache::load(&path).unwrap();
    assert!(!partial.complete);
    let done_before = partial.targets.len();
    assert!(done_before < ds.recordings.len());

    let ok = Counting {
        inner: &base,
        calls: AtomicUsize::new(0),
        fail_on: None,
    };
    let (cache, stats) = build_target_cache(&ds, &TargetSource::Image(&ok), &path).unwrap();
    assert!(cache.complete);
    assert_eq!(cache.targets.len(), ds.recordings.len());
    assert_eq!(stats.reused, done_before);
    assert!(stats.provider_calls < ds.manifest.stimuli.len());
}

#[test]
fn text_cache_uses_label_captions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = overfit_dataset(dir.path());
    let text = StandInTextEmbedder::new(4, 16, 2);
    let captions = CaptionProvider::label_template(&ds.manifest.class_names);
    let source = TargetSource::Text {
        embedder: &text,
        captions: &captions,
        pooled: false,
    };
    let (cache, stats) = build_target_cache(&ds, &source, &dir.path().join("t.cache")).unwrap();
    assert_eq!(stats.provider_calls, 2);
    assert_eq!(cache.shape, EmbeddingShape::Grid { tokens: 4, dim: 16 });
    let pooled = TargetSource::Text {
        embedder: &text,
        captions: &captions,
        pooled: true,
    };
    let (cache, _) = build_target_cache(&ds, &pooled, &dir.path().join("p.cache")).unwrap();
    assert_eq!(cache.shape, EmbeddingShape::Vector { dim: 16 });
}

#[test]
fn first_adam_step_decreases_loss() {
    let dir = tempfile::tempdir().unwrap();
    let ds = overfit_dataset(dir.path());
    let emb = StandInImageEmbedder::new(8, 1);
    let (cache, _) = build_target_cache(&ds, &TargetSource::Image(&emb), &dir.path().join("c")).unwrap();
    let mut enc = tiny_encoder(8, 5);
    let recs = ds.recordings_in(Split::Train).unwrap();
    let views: Vec<_> = recs.iter().map(|r| r.signal.view()).collect();
    let x = eeg2img::encoder::stack_signals(&views).unwrap();
    let y = ndarray::Array2::from_shape_fn((recs.len(), 8), |(i, j)| cache.get(&recs[i].recording_id).unwrap()[j]);
    let (pred, fwd) = enc.forward_with_cache(x.view(), Mode::Train).unwrap();
    let before = mse_loss(pred.view(), y.view()).unwrap();
    let grads = enc.backward(&fwd, &mse_grad(pred.view(), y.view()));
    let mut adam = AdamW::<f32>::new(0.9, 0.999, 1e-8, 1e-4);
    adam.step(enc.params.slices_mut(), grads.slices(), 1e-4);
    let (pred, _) = enc.forward_with_cache(x.view(), Mode::Train).unwrap();
    let after = mse_loss(pred.view(), y.view()).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn overfit_suite_reaches_tiny_train_mse() {
    let dir = tempfile::tempdir().unwrap();
    let ds = overfit_dataset(dir.path());
    assert_eq!(ds.recordings.len(), 8);
    let emb = StandInImageEmbedder::new(8, 1);
    let (cache, _) = build_target_cache(&ds, &TargetSource::Image(&emb), &dir.path().join("c")).unwrap();
    let config = TrainConfig {
        lr: 1e-2,
        ..TrainConfig::new(Space::Image, 500, 8, 4)
    };
    let out = train_alignment(tiny_encoder(8, 5), &ds, &cache, &config).unwrap();
    let last = out.history.last().unwrap();
    println!("first {:?}\nlast {:?}", out.history[0], last);
    assert!(last.train_mse < 1e-3, "final train mse {}", last.train_mse);
    assert_eq!(out.history.len(), 500);
    assert_eq!(last.lr, config.lr_at(499));
    let eval = eval_alignment(&out.last, &ds, &cache, Split::Train).unwrap();
    println!("inference-mode {eval:?}");
}

#[test]
fn training_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ds = overfit_dataset(dir.path());
    let emb = StandInImageEmbedder::new(8, 1);
    let (cache, _) = build_target_cache(&ds, &TargetSource::Image(&emb), &dir.path().join("c")).unwrap();
    let config = TrainConfig::new(Space::Image, 20, 3, 11);
    let a = train_alignment(tiny_encoder(8, 5), &ds, &cache, &config).unwrap();
    let b = train_alignment(tiny_encoder(8, 5), &ds, &cache, &config).unwrap();
    assert_eq!(format!("{:?}", a.history), format!("{:?}", b.history));
    assert_eq!(a.checkpoint.payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               b.checkpoint.payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn shape_mismatch_is_a_preflight_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = overfit_dataset(dir.path());
    let emb = StandInImageEmbedder::new(8, 1);
    let (cache, _) = build_target_cache(&ds, &TargetSource::Image(&emb), &dir.path().join("c")).unwrap();
    let err = train_alignment(tiny_encoder(9, 5), &ds, &cache, &TrainConfig::new(Space::Image, 1, 2, 0)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}
