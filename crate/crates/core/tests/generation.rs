mod common;

use eeg2img::dataset::{class_image, synthetic_class_names};
use eeg2img::embedding::{ImageEmbedder, StandInImageEmbedder, StandInTextEmbedder, TextEmbedder};
use eeg2img::generation::{
    decoupled_cross_attention, generate, scaled_attention, train_toy_backend, BackendConfig, ConditioningBundle,
    LoadedToyBackend, NoiseSchedule, ToyCheckpoint, ToyDenoiserConfig, ToyTrainConfig, ToyTrainingItem,
};
use eeg2img::metrics::PrototypeClassifier;
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn random_matrix(seed: u64, rows: usize, cols: usize, scale: f64) -> Array2<f32> {
    Array2::from_shape_vec((rows, cols), common::pseudo_random(seed, rows * cols).iter().map(|v| (v * scale) as f32).collect())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn image_branch_enters_linearly(
        m in 1usize..6, d in 1usize..9, nt in 1usize..6, ni in 1usize..6, dv in 1usize..7,
        lambda in 0.0f32..4.0, seed in any::<u64>(),
    ) {
        let q = random_matrix(seed, m, d, 2.0);
        let kt = random_matrix(seed ^ 1, nt, d, 2.0);
        let vt = random_matrix(seed ^ 2, nt, dv, 2.0);
        let ki = random_matrix(seed ^ 3, ni, d, 2.0);
        let vi = random_matrix(seed ^ 4, ni, dv, 2.0);
        let full = decoupled_cross_attention(q.view(), kt.view(), vt.view(), ki.view(), vi.view(), lambda).unwrap();
        let text_only = decoupled_cross_attention(q.view(), kt.view(), vt.view(), ki.view(), vi.view(), 0.0).unwrap();
        let (reference, _) = scaled_attention(q.view(), kt.view(), vt.view()).unwrap();
        prop_assert!(text_only.iter().zip(reference.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let (image, _) = scaled_attention(q.view(), ki.view(), vi.view()).unwrap();
        for ((f, t), i) in full.iter().zip(text_only.iter()).zip(image.iter()) {
            prop_assert!(((f - t) - lambda * i).abs() < 1e-6, "{} vs {}", f - t, lambda * i);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations(
        m in 1usize..5, d in 1usize..6, n in 1usize..6, dv in 1usize..5, seed in any::<u64>(),
    ) {
        let q = random_matrix(seed, m, d, 3.0);
        let k = random_matrix(seed ^ 9, n, d, 3.0);
        let v = random_matrix(seed ^ 10, n, dv, 3.0);
        let (out, probs) = scaled_attention(q.view(), k.view(), v.view()).unwrap();
        for row in probs.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        for j in 0..dv {
            let col = v.column(j);
            let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            for i in 0..m {
                prop_assert!(out[[i, j]] >= lo - 1e-5 && out[[i, j]] <= hi + 1e-5);
            }
        }
    }
}

const TEXT_TOKENS: usize = 4;
const TEXT_DIM: usize = 16;
const IMAGE_DIM: usize = 32;

struct Setup {
    items: Vec<ToyTrainingItem>,
    null_text: Array2<f32>,
    images: Vec<Array3<f32>>,
}

fn class_setup(n_classes: usize, blank: bool) -> Setup {
    let text = StandInTextEmbedder::new(TEXT_TOKENS, TEXT_DIM, 1);
    let image = StandInImageEmbedder::new(IMAGE_DIM, 2);
    let names = synthetic_class_names(n_classes);
    let mut items = Vec::new();
    let mut images = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let img = if blank { Array3::zeros((8, 8, 3)) } else { class_image(k, n_classes, 8) };
        let bundle = ConditioningBundle::new(
            text.embed_text(&format!("an image of {name}")).unwrap(),
            image.embed_image(&img).unwrap(),
        );
        images.push(img.clone());
        items.push(ToyTrainingItem { image: img, bundle });
    }
    Setup {
        items,
        null_text: text.embed_text("").unwrap(),
        images,
    }
}

fn train(setup: &Setup, config: &ToyTrainConfig) -> LoadedToyBackend {
    let out = train_toy_backend(
        &setup.items,
        setup.null_text.clone(),
        ToyDenoiserConfig::new(TEXT_TOKENS, TEXT_DIM, IMAGE_DIM),
        NoiseSchedule::default(),
        config,
    )
    .unwrap();
    ToyCheckpoint::from_backend(&out.backend, config, "t", "i").to_backend().unwrap()
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn toy_backend_learns_class_conditional_images() {
    let setup = class_setup(2, false);
    let config = ToyTrainConfig::new(5);
    let out = train_toy_backend(
        &setup.items,
        setup.null_text.clone(),
        ToyDenoiserConfig::new(TEXT_TOKENS, TEXT_DIM, IMAGE_DIM),
        NoiseSchedule::default(),
        &config,
    )
    .unwrap();
    let h = &out.loss_history;
    assert_eq!(h.len(), 2000);
    let (first, last) = (window_mean(&h[..100]), window_mean(&h[h.len() - 100..]));
    println!("loss first {first:.4} last {last:.4}");
    assert!(last < 0.5 * first, "{last} vs {first}");

    let ckpt = ToyCheckpoint::from_backend(&out.backend, &config, "t", "i");
    let backend = ckpt.to_backend().unwrap();
    let classifier = PrototypeClassifier::from_examples(setup.images.iter().enumerate().map(|(k, im)| (k, im)), 2).unwrap();
    let mut correct = 0;
    for seed in 0..100 {
        let class = (seed % 2) as usize;
        let r = generate(&backend, &setup.items[class].bundle, &BackendConfig::toy(seed)).unwrap();
        assert!(r.image.iter().all(|v| (0.0..=1.0).contains(v)));
        if classifier.predict(&r.image) == class {
            correct += 1;
        }
    }
    println!("class-conditional accuracy {correct}/100");
    assert!(correct >= 90, "{correct}");
}

#[test]
fn generation_is_deterministic_and_drop_image_is_lambda_zero() {
    let setup = class_setup(2, false);
    let backend = train(
        &setup,
        &ToyTrainConfig {
            steps: 30,
            ..ToyTrainConfig::new(1)
        },
    );
    let cfg = BackendConfig::toy(42);
    let bundle = &setup.items[0].bundle;
    let a = generate(&backend, bundle, &cfg).unwrap();
    let b = generate(&backend, bundle, &cfg).unwrap();
    assert_eq!(a, b);
    let mut dropped = bundle.clone();
    dropped.drop_image = true;
    let mut zero = bundle.clone();
    zero.image_scale = 0.0;
    let x = generate(&backend, &dropped, &cfg).unwrap().image;
    let y = generate(&backend, &zero, &cfg).unwrap().image;
    assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_ne!(x, a.image);
    assert_eq!(a.provenance.seed, 42);
    assert_eq!(a.provenance.image_scale, 1.0);

    let mut bad = bundle.clone();
    bad.text_tokens = Array2::zeros((3, TEXT_DIM));
    assert!(generate(&backend, &bad, &cfg).is_err());
    assert!(generate(&backend, bundle, &BackendConfig { inference_steps: 0, ..cfg.clone() }).is_err());
}

#[test]
fn lambda_zero_training_leaves_image_branch_untouched() {
    let mut setup = class_setup(2, false);
    for it in &mut setup.items {
        it.bundle.image_scale = 0.0;
    }
    let config = ToyTrainConfig {
        steps: 40,
        ..ToyTrainConfig::new(3)
    };
    let out = train_toy_backend(
        &setup.items,
        setup.null_text.clone(),
        ToyDenoiserConfig::new(TEXT_TOKENS, TEXT_DIM, IMAGE_DIM),
        NoiseSchedule::default(),
        &config,
    )
    .unwrap();
    let init = eeg2img::generation::ToyDenoiser::<f32>::new(ToyDenoiserConfig::new(TEXT_TOKENS, TEXT_DIM, IMAGE_DIM), 3).unwrap();
    assert_eq!(out.backend.denoiser.params.image_branch_slices(), init.params.image_branch_slices());
    assert_ne!(out.backend.denoiser.params, init.params);
}

#[test]
fn blank_images_generate_near_black() {
    let setup = class_setup(2, true);
    let backend = train(
        &setup,
        &ToyTrainConfig {
            steps: 600,
            ..ToyTrainConfig::new(8)
        },
    );
    let r = generate(&backend, &setup.items[0].bundle, &BackendConfig::toy(0)).unwrap();
    let mean = r.image.mean().unwrap();
    assert!(mean < 0.1, "mean pixel {mean}");
}

#[test]
fn toy_checkpoint_round_trip() {
    let setup = class_setup(2, false);
    let config = ToyTrainConfig {
        steps: 5,
        ..ToyTrainConfig::new(1)
    };
    let out = train_toy_backend(
        &setup.items,
        setup.null_text.clone(),
        ToyDenoiserConfig::new(TEXT_TOKENS, TEXT_DIM, IMAGE_DIM),
        NoiseSchedule::default(),
        &config,
    )
    .unwrap();
    let ckpt = ToyCheckpoint::from_backend(&out.backend, &config, "t", "i");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    let hash = ckpt.save(&path).unwrap();
    let loaded = ToyCheckpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.content_hash(), ckpt.content_hash());
    assert_eq!(hash.len(), 64);
    assert_eq!(loaded.to_backend().unwrap().backend, out.backend);
}
