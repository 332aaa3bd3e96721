//! Finite-difference gradient checks shared by the gradient and acceptance
//! suites. Each returns the relative error between the analytic gradient and
//! central differences.

use super::{central_difference, pseudo_random, relative_error};
use eeg2img::encoder::{Encoder, EncoderConfig, EncoderParams, Mode};
use eeg2img::model::EmbeddingShape;
use ndarray::{Array2, Array3};

fn tiny_encoder(seed: u64) -> Encoder<f64> {
    let cfg = EncoderConfig {
        rnn_layers: 2,
        hidden_dim: 4,
        head_hidden_dim: 4,
        ..EncoderConfig::new(3, 6, EmbeddingShape::Vector { dim: 5 })
    };
    let mut enc = Encoder::<f64>::new(cfg, seed).unwrap();
    // Non-trivial batch-norm affine and running statistics.
    let g = pseudo_random(seed + 100, 4);
    enc.params.bn_gamma = g.iter().map(|v| 1.0 + 0.3 * v).collect();
    enc.params.bn_beta = pseudo_random(seed + 101, 4).iter().map(|v| 0.2 * v).collect();
    enc.running_mean = pseudo_random(seed + 102, 4).iter().map(|v| 0.1 * v).collect();
    enc.running_var = pseudo_random(seed + 103, 4).iter().map(|v| 1.0 + 0.5 * v.abs()).collect();
    enc
}

fn flatten(p: &EncoderParams<f64>) -> Vec<f64> {
    p.slices().into_iter().flatten().copied().collect()
}

fn set_flat(p: &mut EncoderParams<f64>, values: &[f64]) {
    let mut off = 0;
    for s in p.slices_mut() {
        s.copy_from_slice(&values[off..off + s.len()]);
        off += s.len();
    }
}

pub fn encoder_rel_err(mode: Mode, batch_size: usize, seed: u64) -> f64 {
    let enc = tiny_encoder(seed);
    let batch = Array3::from_shape_vec((batch_size, 3, 6), pseudo_random(seed + 1, batch_size * 18)).unwrap();
    let weights = Array2::from_shape_vec((batch_size, 5), pseudo_random(seed + 2, batch_size * 5)).unwrap();

    let (_, cache) = enc.forward_with_cache(batch.view(), mode).unwrap();
    let analytic = flatten(&enc.backward(&cache, &weights));

    let theta = flatten(&enc.params);
    let mut probe = enc.clone();
    let numeric = central_difference(&theta, 1e-6, |x| {
        set_flat(&mut probe.params, x);
        let (out, _) = probe.forward_with_cache(batch.view(), mode).unwrap();
        (&out * &weights).sum()
    });
    relative_error(&analytic, &numeric)
}

pub mod attention {
    use super::{central_difference, pseudo_random, relative_error};
    use eeg2img::generation::{decoupled_backward, decoupled_forward};
    use ndarray::{Array2, ArrayView2};

    const M: usize = 3;
    const D: usize = 4;
    const NT: usize = 2;
    const NI: usize = 3;
    const DV: usize = 5;

    fn unpack(x: &[f64]) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>, f64) {
        let mut off = 0;
        let mut take = |r: usize, c: usize| {
            let a = Array2::from_shape_vec((r, c), x[off..off + r * c].to_vec()).unwrap();
            off += r * c;
            a
        };
        let q = take(M, D);
        let kt = take(NT, D);
        let vt = take(NT, DV);
        let ki = take(NI, D);
        let vi = take(NI, DV);
        (q, kt, vt, ki, vi, x[x.len() - 1])
    }

    fn objective(x: &[f64], w: ArrayView2<'_, f64>) -> f64 {
        let (q, kt, vt, ki, vi, l) = unpack(x);
        let (out, _) = decoupled_forward(q.view(), kt.view(), vt.view(), ki.view(), vi.view(), l).unwrap();
        (&out * &w).sum()
    }

    pub fn rel_err(seed: u64, lambda: f64) -> f64 {
        let n = M * D + NT * D + NT * DV + NI * D + NI * DV;
        let mut x: Vec<f64> = pseudo_random(seed, n).iter().map(|v| 1.5 * v).collect();
        x.push(lambda);
        let w = Array2::from_shape_vec((M, DV), pseudo_random(seed + 7, M * DV)).unwrap();
        let (q, kt, vt, ki, vi, l) = unpack(&x);
        let (_, cache) = decoupled_forward(q.view(), kt.view(), vt.view(), ki.view(), vi.view(), l).unwrap();
        let g = decoupled_backward(&cache, w.view());
        let mut analytic: Vec<f64> = Vec::new();
        for a in [&g.q, &g.kt, &g.vt, &g.ki, &g.vi] {
            analytic.extend(a.iter());
        }
        analytic.push(g.lambda);
        let numeric = central_difference(&x, 1e-5, |p| objective(p, w.view()));
        relative_error(&analytic, &numeric)
    }
}

pub mod denoiser {
    use super::{central_difference, pseudo_random, relative_error};
    use eeg2img::generation::toy::Conditioning;
    use eeg2img::generation::{ToyDenoiser, ToyDenoiserConfig};
    use ndarray::{Array1, Array2};

    fn config() -> ToyDenoiserConfig {
        ToyDenoiserConfig {
            image_size: 4,
            patch: 2,
            model_dim: 4,
            mlp_dim: 6,
            blocks: 2,
            time_features: 4,
            text_tokens: 2,
            text_dim: 3,
            image_dim: 5,
            image_tokens: 2,
        }
    }

    pub fn rel_err(seed: u64, lambda: f64) -> f64 {
        let mut model = ToyDenoiser::<f64>::new(config(), seed).unwrap();
        let n_params: usize = model.params.len();
        // Random biases too, so every code path carries signal.
        let base: Vec<f64> = pseudo_random(seed + 50, n_params).iter().map(|v| 0.6 * v).collect();
        let mut off = 0;
        for s in model.params.slices_mut() {
            s.copy_from_slice(&base[off..off + s.len()]);
            off += s.len();
        }
        let patches = Array2::from_shape_vec((4, 12), pseudo_random(seed + 1, 48)).unwrap();
        let text = Array2::from_shape_vec((2, 3), pseudo_random(seed + 2, 6)).unwrap();
        let emb = Array1::from(pseudo_random(seed + 3, 5));
        let w = Array2::from_shape_vec((4, 12), pseudo_random(seed + 4, 48)).unwrap();
        let cond = Conditioning {
            text: text.view(),
            image_embedding: emb.view(),
            lambda,
        };
        let (_, cache) = model.forward(patches.view(), 37, cond).unwrap();
        let grads = model.backward(&cache, w.view());
        let analytic: Vec<f64> = grads.slices().into_iter().flatten().copied().collect();
        let numeric = central_difference(&base, 1e-5, |p| {
            let mut m = model.clone();
            let mut off = 0;
            for s in m.params.slices_mut() {
                s.copy_from_slice(&p[off..off + s.len()]);
                off += s.len();
            }
            let (out, _) = m.forward(patches.view(), 37, cond).unwrap();
            (&out * &w).sum()
        });
        relative_error(&analytic, &numeric)
    }
}
