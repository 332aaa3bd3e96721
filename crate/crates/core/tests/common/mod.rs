#![allow(dead_code)]

//! Test-only oracles. Nothing here calls a backward pass.

pub mod gradcheck;

/// Central-difference gradient of `f` at `x`.
pub fn central_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Deterministic pseudo-random values in [-1, 1] (SplitMix64), independent of
/// the crate's own generators.
pub fn pseudo_random(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

use std::path::Path;

use eeg2img::dataset::{generate_synthetic, ingest, make_splits, Dataset, PreprocessConfig, SplitFractions, SyntheticSpec};
use eeg2img::model::save_manifest;

/// Synthesizes a raw tree, ingests it with z-scoring and splits it.
pub fn synthetic_dataset(dir: &Path, spec: &SyntheticSpec, fractions: SplitFractions, split_seed: u64) -> Dataset {
    let raw = dir.join("raw");
    let processed = dir.join("processed");
    generate_synthetic(spec, &raw).unwrap();
    let report = ingest(&raw, &processed, &PreprocessConfig::default()).unwrap();
    let split = make_splits(&report.manifest, fractions, split_seed).unwrap();
    let path = processed.join("manifest.json");
    save_manifest(&path, &split).unwrap();
    Dataset::load(&path).unwrap()
}
