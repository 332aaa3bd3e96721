//! Self-contained conditional diffusion model for tiny RGB images.
//!
//! The denoiser cuts the image into 2×2 patches, adds learned position and
//! sinusoidal timestep embeddings, and runs a stack of residual blocks. Each
//! block is a decoupled cross-attention over (text tokens, projected image
//! tokens) followed by a SiLU MLP. It predicts the added noise and is
//! trained by denoising score matching under a linear β schedule. Sampling
//! is ancestral over an evenly strided subset of the training timesteps.

use log::debug;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attention::{decoupled_backward, decoupled_forward, project_image_embedding, AttentionCache};
use super::ConditioningBundle;
use crate::error::{Error, Result};
use crate::numeric::{pairwise_mean, real, rng_from_seed, sigmoid, substream, uniform_matrix, Real};
use crate::training::AdamW;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDenoiserConfig {
    pub image_size: usize,
    pub patch: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub blocks: usize,
    pub time_features: usize,
    pub text_tokens: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub image_tokens: usize,
}

impl ToyDenoiserConfig {
    pub fn new(text_tokens: usize, text_dim: usize, image_dim: usize) -> Self {
        ToyDenoiserConfig {
            image_size: 8,
            patch: 2,
            model_dim: 32,
            mlp_dim: 64,
            blocks: 2,
            time_features: 16,
            text_tokens,
            text_dim,
            image_dim,
            image_tokens: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.image_size == 0 || self.image_size > 16 {
            problems.push(format!("image_size must be in 1..=16, got {}", self.image_size));
        }
        if self.patch == 0 || self.image_size % self.patch.max(1) != 0 {
            problems.push(format!("patch {} must divide image_size {}", self.patch, self.image_size));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            problems.push("time_features must be a positive even number".into());
        }
        for (name, v) in [
            ("model_dim", self.model_dim),
            ("mlp_dim", self.mlp_dim),
            ("text_tokens", self.text_tokens),
            ("text_dim", self.text_dim),
            ("image_dim", self.image_dim),
            ("image_tokens", self.image_tokens),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Linear β schedule. The defaults are the common 1000-step range
/// (1e-4 … 0.02) rescaled to 200 steps so that ᾱ_T is close to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            train_steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.train_steps < 2 || !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config(format!("invalid noise schedule {self:?}")));
        }
        Ok(())
    }

    pub fn betas(&self) -> Vec<f64> {
        let n = self.train_steps;
        (0..n)
            .map(|i| self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// Cumulative products ᾱ_t.
    pub fn alpha_bars(&self) -> Vec<f64> {
        let mut acc = 1.0;
        self.betas()
            .into_iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect()
    }

    /// Descending timesteps visited by a sampler with `steps` steps; always
    /// starts at the last training step.
    pub fn sampling_timesteps(&self, steps: usize) -> Vec<usize> {
        let t = self.train_steps;
        let mut out: Vec<usize> = (0..steps).map(|i| ((i + 1) * t / steps).max(1) - 1).collect();
        out.dedup();
        out.reverse();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub wq: Array2<T>,
    pub wk_text: Array2<T>,
    pub wv_text: Array2<T>,
    pub wk_image: Array2<T>,
    pub wv_image: Array2<T>,
    pub wo: Array2<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams<T> {
    pub w_in: Array2<T>,
    pub b_in: Array1<T>,
    pub pos: Array2<T>,
    pub w_time: Array2<T>,
    pub proj_w: Array2<T>,
    pub proj_b: Array1<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub w_out: Array2<T>,
    pub b_out: Array1<T>,
}

impl<T: Real> ToyParams<T> {
    pub fn slices(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![
            self.w_in.as_slice().unwrap(),
            self.b_in.as_slice().unwrap(),
            self.pos.as_slice().unwrap(),
            self.w_time.as_slice().unwrap(),
            self.proj_w.as_slice().unwrap(),
            self.proj_b.as_slice().unwrap(),
        ];
        for b in &self.blocks {
            for m in [&b.wq, &b.wk_text, &b.wv_text, &b.wk_image, &b.wv_image, &b.wo, &b.w1, &b.w2] {
                v.push(m.as_slice().unwrap());
            }
            v.push(b.b1.as_slice().unwrap());
            v.push(b.b2.as_slice().unwrap());
        }
        v.push(self.w_out.as_slice().unwrap());
        v.push(self.b_out.as_slice().unwrap());
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = vec![
            self.w_in.as_slice_mut().unwrap(),
            self.b_in.as_slice_mut().unwrap(),
            self.pos.as_slice_mut().unwrap(),
            self.w_time.as_slice_mut().unwrap(),
            self.proj_w.as_slice_mut().unwrap(),
            self.proj_b.as_slice_mut().unwrap(),
        ];
        for b in &mut self.blocks {
            for m in [
                &mut b.wq,
                &mut b.wk_text,
                &mut b.wv_text,
                &mut b.wk_image,
                &mut b.wv_image,
                &mut b.wo,
                &mut b.w1,
                &mut b.w2,
            ] {
                v.push(m.as_slice_mut().unwrap());
            }
            v.push(b.b1.as_slice_mut().unwrap());
            v.push(b.b2.as_slice_mut().unwrap());
        }
        v.push(self.w_out.as_slice_mut().unwrap());
        v.push(self.b_out.as_slice_mut().unwrap());
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(T::zero());
        }
        z
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters that only influence the image branch.
    pub fn image_branch_slices(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![self.proj_w.as_slice().unwrap(), self.proj_b.as_slice().unwrap()];
        for b in &self.blocks {
            v.push(b.wk_image.as_slice().unwrap());
            v.push(b.wv_image.as_slice().unwrap());
        }
        v
    }
}

struct BlockCache<T> {
    h_in: Array2<T>,
    attention: AttentionCache<T>,
    attn_out: Array2<T>,
    h1: Array2<T>,
    z: Array2<T>,
    s: Array2<T>,
}

/// Activations of one forward pass.
pub struct DenoiserCache<T> {
    patches: Array2<T>,
    time: Array1<T>,
    text: Array2<T>,
    image_embedding: Array1<T>,
    image_tokens: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    h_out: Array2<T>,
}

/// The conditioning seen by one denoiser evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a, T> {
    pub text: ArrayView2<'a, T>,
    pub image_embedding: ArrayView1<'a, T>,
    pub lambda: T,
}

fn outer<T: Real>(a: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

fn silu<T: Real>(z: T) -> T {
    z * sigmoid(z)
}

fn silu_grad<T: Real>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser<T> {
    pub config: ToyDenoiserConfig,
    pub params: ToyParams<T>,
}

impl<T: Real> ToyDenoiser<T> {
    pub fn new(config: ToyDenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let c = &config;
        let (d, m, pd, n) = (c.model_dim, c.mlp_dim, c.patch_dim(), c.n_patches());
        // Uniform(±1/√fan_in) for every dense map.
        let mut dense = |rows: usize, cols: usize, fan_in: usize| -> Array2<T> {
            uniform_matrix(&mut rng, rows, cols, 1.0 / (fan_in as f64).sqrt())
        };
        let w_in = dense(pd, d, pd);
        let pos = dense(n, d, n);
        let w_time = dense(c.time_features, d, c.time_features);
        let proj_w = dense(c.image_tokens * c.text_dim, c.image_dim, c.image_dim);
        let blocks = (0..c.blocks)
            .map(|_| BlockParams {
                wq: dense(d, d, d),
                wk_text: dense(c.text_dim, d, c.text_dim),
                wv_text: dense(c.text_dim, d, c.text_dim),
                wk_image: dense(c.text_dim, d, c.text_dim),
                wv_image: dense(c.text_dim, d, c.text_dim),
                wo: dense(d, d, d),
                w1: dense(d, m, d),
                b1: Array1::zeros(m),
                w2: dense(m, d, m),
                b2: Array1::zeros(d),
            })
            .collect();
        let w_out = dense(d, pd, d);
        Ok(ToyDenoiser {
            params: ToyParams {
                w_in,
                b_in: Array1::zeros(d),
                pos,
                w_time,
                proj_w,
                proj_b: Array1::zeros(c.image_tokens * c.text_dim),
                blocks,
                w_out,
                b_out: Array1::zeros(pd),
            },
            config,
        })
    }

    pub fn from_flat(config: ToyDenoiserConfig, flat: &[f32]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let n = model.params.len();
        if flat.len() != n {
            return Err(Error::Shape(format!("expected {n} denoiser parameters, found {}", flat.len())));
        }
        let mut it = flat.iter();
        for s in model.params.slices_mut() {
            for (x, v) in s.iter_mut().zip(&mut it) {
                *x = real(*v as f64);
            }
        }
        Ok(model)
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.params.slices().iter().flat_map(|s| s.iter().map(|v| v.to_f32_lossy())).collect()
    }

    pub fn time_features(&self, t: usize) -> Array1<T> {
        let half = self.config.time_features / 2;
        let mut f = Array1::zeros(2 * half);
        for k in 0..half {
            let freq = 1000f64.powf(-(k as f64) / half as f64);
            f[2 * k] = real((t as f64 * freq).sin());
            f[2 * k + 1] = real((t as f64 * freq).cos());
        }
        f
    }

    fn check_conditioning(&self, cond: &Conditioning<'_, T>) -> Result<()> {
        let c = &self.config;
        if cond.text.dim() != (c.text_tokens, c.text_dim) {
            return Err(Error::Shape(format!(
                "text conditioning is {:?}, backend expects [{}, {}]",
                cond.text.dim(),
                c.text_tokens,
                c.text_dim
            )));
        }
        if cond.image_embedding.len() != c.image_dim {
            return Err(Error::Shape(format!(
                "image conditioning has dim {}, backend expects {}",
                cond.image_embedding.len(),
                c.image_dim
            )));
        }
        Ok(())
    }

    /// Predicts the noise in `patches` (`[n_patches, patch_dim]`) at step `t`.
    pub fn forward(&self, patches: ArrayView2<'_, T>, t: usize, cond: Conditioning<'_, T>) -> Result<(Array2<T>, DenoiserCache<T>)> {
        self.check_conditioning(&cond)?;
        let c = &self.config;
        if patches.dim() != (c.n_patches(), c.patch_dim()) {
            return Err(Error::Shape(format!("patch grid {:?} does not match the denoiser", patches.dim())));
        }
        let p = &self.params;
        let time = self.time_features(t);
        let mut h = patches.dot(&p.w_in) + &p.b_in + &p.pos + &time.dot(&p.w_time);
        let image_tokens = project_image_embedding(cond.image_embedding, p.proj_w.view(), p.proj_b.view(), c.image_tokens)?;
        let mut blocks = Vec::with_capacity(p.blocks.len());
        for b in &p.blocks {
            let q = h.dot(&b.wq);
            let kt = cond.text.dot(&b.wk_text);
            let vt = cond.text.dot(&b.wv_text);
            let ki = image_tokens.dot(&b.wk_image);
            let vi = image_tokens.dot(&b.wv_image);
            let (attn_out, attention) = decoupled_forward(q.view(), kt.view(), vt.view(), ki.view(), vi.view(), cond.lambda)?;
            let h1 = &h + &attn_out.dot(&b.wo);
            let z = h1.dot(&b.w1) + &b.b1;
            let s = z.mapv(silu);
            let h2 = &h1 + &s.dot(&b.w2) + &b.b2;
            blocks.push(BlockCache {
                h_in: h,
                attention,
                attn_out,
                h1,
                z,
                s,
            });
            h = h2;
        }
        let out = h.dot(&p.w_out) + &p.b_out;
        Ok((
            out,
            DenoiserCache {
                patches: patches.to_owned(),
                time,
                text: cond.text.to_owned(),
                image_embedding: cond.image_embedding.to_owned(),
                image_tokens,
                blocks,
                h_out: h,
            },
        ))
    }

    /// Parameter gradient of `sum(grad_out ⊙ output)`.
    pub fn backward(&self, cache: &DenoiserCache<T>, grad_out: ArrayView2<'_, T>) -> ToyParams<T> {
        let p = &self.params;
        let mut g = p.zeros_like();
        g.w_out = cache.h_out.t().dot(&grad_out);
        g.b_out = grad_out.sum_axis(Axis(0));
        let mut dh = grad_out.dot(&p.w_out.t());
        let mut d_tokens = Array2::<T>::zeros(cache.image_tokens.raw_dim());
        for (i, (b, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut g.blocks[i];
            // h2 = h1 + silu(h1 W1 + b1) W2 + b2
            gb.w2 = bc.s.t().dot(&dh);
            gb.b2 = dh.sum_axis(Axis(0));
            let dz = dh.dot(&b.w2.t()) * &bc.z.mapv(silu_grad);
            gb.w1 = bc.h1.t().dot(&dz);
            gb.b1 = dz.sum_axis(Axis(0));
            let dh1 = &dh + &dz.dot(&b.w1.t());
            // h1 = h + attn Wo
            gb.wo = bc.attn_out.t().dot(&dh1);
            let da = dh1.dot(&b.wo.t());
            let ag = decoupled_backward(&bc.attention, da.view());
            gb.wq = bc.h_in.t().dot(&ag.q);
            gb.wk_text = cache.text.t().dot(&ag.kt);
            gb.wv_text = cache.text.t().dot(&ag.vt);
            gb.wk_image = cache.image_tokens.t().dot(&ag.ki);
            gb.wv_image = cache.image_tokens.t().dot(&ag.vi);
            d_tokens = d_tokens + ag.ki.dot(&b.wk_image.t()) + ag.vi.dot(&b.wv_image.t());
            dh = dh1 + ag.q.dot(&b.wq.t());
        }
        let d_flat = d_tokens.into_shape_with_order(p.proj_b.len()).expect("contiguous");
        g.proj_w = outer(&d_flat, &cache.image_embedding);
        g.proj_b = d_flat;
        g.w_in = cache.patches.t().dot(&dh);
        g.b_in = dh.sum_axis(Axis(0));
        g.w_time = outer(&cache.time, &g.b_in);
        g.pos = dh;
        g
    }
}

/// `[h, w, 3]` image → `[n_patches, patch_dim]`.
pub fn patchify<T: Real>(image: &Array3<T>, patch: usize) -> Array2<T> {
    let (h, w, _) = image.dim();
    let (gh, gw) = (h / patch, w / patch);
    Array2::from_shape_fn((gh * gw, patch * patch * 3), |(i, j)| {
        let (py, px) = (i / gw, i % gw);
        let (dy, rest) = (j / (patch * 3), j % (patch * 3));
        let (dx, c) = (rest / 3, rest % 3);
        image[[py * patch + dy, px * patch + dx, c]]
    })
}

pub fn unpatchify<T: Real>(patches: &Array2<T>, image_size: usize, patch: usize) -> Array3<T> {
    let gw = image_size / patch;
    Array3::from_shape_fn((image_size, image_size, 3), |(y, x, c)| {
        let i = (y / patch) * gw + x / patch;
        let j = ((y % patch) * patch + x % patch) * 3 + c;
        patches[[i, j]]
    })
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z as f32
    })
}

/// A trained toy denoiser plus everything sampling needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackend {
    pub denoiser: ToyDenoiser<f32>,
    pub schedule: NoiseSchedule,
    /// Text conditioning used when the text branch is dropped: the embedding
    /// of the empty caption.
    pub null_text: Array2<f32>,
}

impl ToyBackend {
    pub fn check_bundle(&self, bundle: &ConditioningBundle) -> Result<()> {
        let c = &self.denoiser.config;
        let mut problems = Vec::new();
        if bundle.text_tokens.dim() != (c.text_tokens, c.text_dim) {
            problems.push(format!(
                "text tokens are {:?}, backend expects ({}, {})",
                bundle.text_tokens.dim(),
                c.text_tokens,
                c.text_dim
            ));
        }
        if bundle.image_embedding.len() != c.image_dim {
            problems.push(format!(
                "image embedding has dim {}, backend expects {}",
                bundle.image_embedding.len(),
                c.image_dim
            ));
        }
        if !bundle.image_scale.is_finite() || bundle.image_scale < 0.0 {
            problems.push(format!("image scale must be finite and ≥ 0, got {}", bundle.image_scale));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Shape(problems.join("; ")))
        }
    }

    /// Ancestral sampling with `steps` denoising steps. Returns pixels in [0, 1].
    pub fn sample(&self, bundle: &ConditioningBundle, steps: usize, seed: u64) -> Result<Array3<f32>> {
        self.check_bundle(bundle)?;
        if steps == 0 || steps > self.schedule.train_steps {
            return Err(Error::Config(format!(
                "inference_steps must be in 1..={}, got {steps}",
                self.schedule.train_steps
            )));
        }
        let c = &self.denoiser.config;
        let text = if bundle.drop_text { &self.null_text } else { &bundle.text_tokens };
        let cond = Conditioning {
            text: text.view(),
            image_embedding: bundle.image_embedding.view(),
            lambda: bundle.effective_scale(),
        };
        let ab = self.schedule.alpha_bars();
        let timesteps = self.schedule.sampling_timesteps(steps);
        let mut rng = rng_from_seed(seed);
        let mut x = gaussian(&mut rng, c.n_patches(), c.patch_dim());
        for (i, &t) in timesteps.iter().enumerate() {
            let (eps, _) = self.denoiser.forward(x.view(), t, cond)?;
            if !eps.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("denoising step {i} (t = {t})"),
                });
            }
            let ab_t = ab[t];
            let x0 = ((&x - &(&eps * (1.0 - ab_t).sqrt() as f32)) / ab_t.sqrt() as f32).mapv(|v| v.clamp(-1.0, 1.0));
            match timesteps.get(i + 1) {
                Some(&s) => {
                    let ab_s = ab[s];
                    let alpha = ab_t / ab_s;
                    let beta = 1.0 - alpha;
                    let c0 = (ab_s.sqrt() * beta / (1.0 - ab_t)) as f32;
                    let ct = (alpha.sqrt() * (1.0 - ab_s) / (1.0 - ab_t)) as f32;
                    let sigma = ((1.0 - ab_s) / (1.0 - ab_t) * beta).sqrt() as f32;
                    let z = gaussian(&mut rng, c.n_patches(), c.patch_dim());
                    x = x0 * c0 + &(&x * ct) + &(z * sigma);
                }
                None => x = x0,
            }
        }
        let image = unpatchify(&x, c.image_size, c.patch);
        Ok(image.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability of replacing a sample's text tokens with the null text.
    pub p_drop_text: f64,
    /// Probability of zeroing a sample's image scale.
    pub p_drop_image: f64,
    pub seed: u64,
}

impl ToyTrainConfig {
    pub fn new(seed: u64) -> Self {
        ToyTrainConfig {
            steps: 2000,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 0.0,
            p_drop_text: 0.1,
            p_drop_image: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps == 0 || self.batch_size == 0 {
            problems.push("steps and batch_size must be positive".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        for (name, p) in [("p_drop_text", self.p_drop_text), ("p_drop_image", self.p_drop_image)] {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// One training pair: a target image (pixels in [0, 1]) and its conditioning.
#[derive(Debug, Clone)]
pub struct ToyTrainingItem {
    pub image: Array3<f32>,
    pub bundle: ConditioningBundle,
}

#[derive(Debug, Clone)]
pub struct ToyTrainOutcome {
    pub backend: ToyBackend,
    /// Mean batch loss of every optimisation step.
    pub loss_history: Vec<f64>,
}

struct Draw {
    item: usize,
    t: usize,
    noise: Array2<f32>,
    drop_text: bool,
    drop_image: bool,
}

/// Denoising score matching: minimises `‖ε − ε̂(√ᾱ_t x₀ + √(1−ᾱ_t) ε, t, c)‖²`.
pub fn train_toy_backend(
    items: &[ToyTrainingItem],
    null_text: Array2<f32>,
    denoiser: ToyDenoiserConfig,
    schedule: NoiseSchedule,
    config: &ToyTrainConfig,
) -> Result<ToyTrainOutcome> {
    config.validate()?;
    schedule.validate()?;
    if items.is_empty() {
        return Err(Error::Dataset("toy backend training needs at least one image".into()));
    }
    let model = ToyDenoiser::<f32>::new(denoiser, config.seed)?;
    let mut backend = ToyBackend {
        denoiser: model,
        schedule,
        null_text,
    };
    let c = backend.denoiser.config.clone();
    for (i, item) in items.iter().enumerate() {
        backend.check_bundle(&item.bundle).map_err(|e| Error::Dataset(format!("training item {i}: {e}")))?;
        if item.image.dim() != (c.image_size, c.image_size, 3) {
            return Err(Error::Shape(format!(
                "training item {i} is {:?}, backend expects {s}x{s}x3",
                item.image.dim(),
                s = c.image_size
            )));
        }
    }
    if backend.null_text.dim() != (c.text_tokens, c.text_dim) {
        return Err(Error::Shape("null text embedding does not match the text conditioning shape".into()));
    }
    let clean: Vec<Array2<f32>> = items
        .iter()
        .map(|it| patchify(&it.image.mapv(|v| v * 2.0 - 1.0), c.patch))
        .collect();
    let ab = backend.schedule.alpha_bars();
    let mut adam = AdamW::<f32>::new(0.9, 0.999, 1e-8, config.weight_decay);
    let mut history = Vec::with_capacity(config.steps);
    let elems = (c.n_patches() * c.patch_dim() * config.batch_size) as f32;
    for step in 0..config.steps {
        let mut rng = substream(config.seed, step as u64);
        let draws: Vec<Draw> = (0..config.batch_size)
            .map(|_| Draw {
                item: rng.random_range(0..items.len()),
                t: rng.random_range(0..backend.schedule.train_steps),
                noise: gaussian(&mut rng, c.n_patches(), c.patch_dim()),
                drop_text: rng.random_bool(config.p_drop_text),
                drop_image: rng.random_bool(config.p_drop_image),
            })
            .collect();
        let model = &backend.denoiser;
        let null = &backend.null_text;
        let per_sample: Vec<Result<(f64, ToyParams<f32>)>> = draws
            .par_iter()
            .map(|d| {
                let item = &items[d.item];
                let x0 = &clean[d.item];
                let a = ab[d.t];
                let xt = x0 * a.sqrt() as f32 + &(&d.noise * (1.0 - a).sqrt() as f32);
                let mut lambda = item.bundle.effective_scale();
                if d.drop_image {
                    lambda = 0.0;
                }
                let text = if d.drop_text || item.bundle.drop_text { null } else { &item.bundle.text_tokens };
                let cond = Conditioning {
                    text: text.view(),
                    image_embedding: item.bundle.image_embedding.view(),
                    lambda,
                };
                let (pred, cache) = model.forward(xt.view(), d.t, cond)?;
                let diff = pred - &d.noise;
                let loss = diff.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
                let grad = diff * (2.0 / elems);
                Ok((loss, model.backward(&cache, grad.view())))
            })
            .collect();
        let mut total = backend.denoiser.params.zeros_like();
        let mut losses = Vec::with_capacity(per_sample.len());
        for r in per_sample {
            let (loss, g) = r?;
            losses.push(loss);
            total.add_assign(&g);
        }
        let loss = pairwise_mean(&losses) / (c.n_patches() * c.patch_dim()) as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("toy backend loss at step {step}"),
            });
        }
        adam.step(backend.denoiser.params.slices_mut(), total.slices(), config.lr);
        history.push(loss);
        if step % 200 == 0 {
            debug!("toy backend step {step}: loss {loss:.4}");
        }
    }
    Ok(ToyTrainOutcome {
        backend,
        loss_history: history,
    })
}
