//! Recurrent EEG encoder: a stacked LSTM over the signal followed by a
//! `Linear -> BatchNorm -> LeakyReLU -> Linear` head.
//!
//! Gate layout follows the common convention: each LSTM layer holds
//! `w_ih [4h x in]`, `w_hh [4h x h]` and two bias vectors, gates ordered
//! input, forget, cell, output. Gradients are computed by hand
//! (backpropagation through time) and checked against finite differences in
//! the tests.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{content_hash, Container};
use crate::error::{Error, Result};
use crate::model::{EmbeddingShape, Space};
use crate::numeric::{real, rng_from_seed, sigmoid, uniform_matrix, uniform_vector, Real};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceAxis {
    /// Recurrence over timesteps; channels are the per-step features.
    #[default]
    Time,
    /// Recurrence over channels; timesteps are the per-step features.
    Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_channels: usize,
    pub n_timesteps: usize,
    #[serde(default = "defaults::rnn_layers")]
    pub rnn_layers: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden_dim: usize,
    #[serde(default = "defaults::hidden")]
    pub head_hidden_dim: usize,
    pub output_shape: EmbeddingShape,
    #[serde(default = "defaults::leaky_slope")]
    pub leaky_slope: f64,
    #[serde(default)]
    pub sequence_axis: SequenceAxis,
    #[serde(default = "defaults::bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "defaults::bn_momentum")]
    pub bn_momentum: f64,
}

mod defaults {
    pub fn rnn_layers() -> usize {
        3
    }
    pub fn hidden() -> usize {
        512
    }
    pub fn leaky_slope() -> f64 {
        0.01
    }
    pub fn bn_eps() -> f64 {
        1e-5
    }
    pub fn bn_momentum() -> f64 {
        0.1
    }
}

impl EncoderConfig {
    pub fn new(n_channels: usize, n_timesteps: usize, output_shape: EmbeddingShape) -> Self {
        EncoderConfig {
            n_channels,
            n_timesteps,
            rnn_layers: defaults::rnn_layers(),
            hidden_dim: defaults::hidden(),
            head_hidden_dim: defaults::hidden(),
            output_shape,
            leaky_slope: defaults::leaky_slope(),
            sequence_axis: SequenceAxis::Time,
            bn_eps: defaults::bn_eps(),
            bn_momentum: defaults::bn_momentum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_channels", self.n_channels),
            ("n_timesteps", self.n_timesteps),
            ("rnn_layers", self.rnn_layers),
            ("hidden_dim", self.hidden_dim),
            ("head_hidden_dim", self.head_hidden_dim),
            ("output size", self.output_shape.len()),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("encoder {name} must be at least 1")));
            }
        }
        if !(self.bn_eps > 0.0 && (0.0..=1.0).contains(&self.bn_momentum) && self.leaky_slope.is_finite()) {
            return Err(Error::Config("encoder batch-norm or slope settings out of range".into()));
        }
        Ok(())
    }

    /// Feature size of one recurrence step.
    pub fn input_dim(&self) -> usize {
        match self.sequence_axis {
            SequenceAxis::Time => self.n_channels,
            SequenceAxis::Channel => self.n_timesteps,
        }
    }

    pub fn sequence_len(&self) -> usize {
        match self.sequence_axis {
            SequenceAxis::Time => self.n_timesteps,
            SequenceAxis::Channel => self.n_channels,
        }
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.len()
    }

    pub fn recurrent_parameter_count(&self) -> usize {
        let h = self.hidden_dim;
        (0..self.rnn_layers)
            .map(|l| {
                let input = if l == 0 { self.input_dim() } else { h };
                4 * (input * h + h * h + 2 * h)
            })
            .sum()
    }

    pub fn head_parameter_count(&self) -> usize {
        let (h, hh, out) = (self.hidden_dim, self.head_hidden_dim, self.output_len());
        (h * hh + hh) + 2 * hh + (hh * out + out)
    }

    /// Number of trainable parameters (batch-norm running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.recurrent_parameter_count() + self.head_parameter_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<T> {
    pub w_ih: Array2<T>,
    pub w_hh: Array2<T>,
    pub b_ih: Array1<T>,
    pub b_hh: Array1<T>,
}

/// Trainable parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub lstm: Vec<LstmLayer<T>>,
    pub fc1_w: Array2<T>,
    pub fc1_b: Array1<T>,
    pub bn_gamma: Array1<T>,
    pub bn_beta: Array1<T>,
    pub fc2_w: Array2<T>,
    pub fc2_b: Array1<T>,
}

impl<T: Real> EncoderParams<T> {
    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<T>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<T>| Array1::zeros(a.raw_dim());
        EncoderParams {
            lstm: self
                .lstm
                .iter()
                .map(|l| LstmLayer {
                    w_ih: z2(&l.w_ih),
                    w_hh: z2(&l.w_hh),
                    b_ih: z1(&l.b_ih),
                    b_hh: z1(&l.b_hh),
                })
                .collect(),
            fc1_w: z2(&self.fc1_w),
            fc1_b: z1(&self.fc1_b),
            bn_gamma: z1(&self.bn_gamma),
            bn_beta: z1(&self.bn_beta),
            fc2_w: z2(&self.fc2_w),
            fc2_b: z1(&self.fc2_b),
        }
    }

    /// Parameter tensors as flat slices, in a fixed order.
    pub fn slices(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for l in &self.lstm {
            v.push(l.w_ih.as_slice().unwrap());
            v.push(l.w_hh.as_slice().unwrap());
            v.push(l.b_ih.as_slice().unwrap());
            v.push(l.b_hh.as_slice().unwrap());
        }
        for a in [&self.fc1_b, &self.bn_gamma, &self.bn_beta, &self.fc2_b] {
            v.push(a.as_slice().unwrap());
        }
        v.push(self.fc1_w.as_slice().unwrap());
        v.push(self.fc2_w.as_slice().unwrap());
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for l in &mut self.lstm {
            v.push(l.w_ih.as_slice_mut().unwrap());
            v.push(l.w_hh.as_slice_mut().unwrap());
            v.push(l.b_ih.as_slice_mut().unwrap());
            v.push(l.b_hh.as_slice_mut().unwrap());
        }
        for a in [&mut self.fc1_b, &mut self.bn_gamma, &mut self.bn_beta, &mut self.fc2_b] {
            v.push(a.as_slice_mut().unwrap());
        }
        v.push(self.fc1_w.as_slice_mut().unwrap());
        v.push(self.fc2_w.as_slice_mut().unwrap());
        v
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Whether batch-norm uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    /// Inputs per step, stacked: `[L * B, in]`, step-major.
    inputs: Array2<T>,
    i: Vec<Array2<T>>,
    f: Vec<Array2<T>>,
    g: Vec<Array2<T>>,
    o: Vec<Array2<T>>,
    c_prev: Vec<Array2<T>>,
    tanh_c: Vec<Array2<T>>,
    /// Hidden state entering each step, stacked `[L * B, h]`.
    h_prev: Array2<T>,
}

/// Intermediate values of a forward pass needed by [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    mode: Mode,
    batch: usize,
    layers: Vec<LayerCache<T>>,
    last_hidden: Array2<T>,
    xhat: Array2<T>,
    inv_std: Array1<T>,
    bn_out: Array2<T>,
    activated: Array2<T>,
    batch_mean: Array1<T>,
    batch_var: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: EncoderParams<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

impl<T: Real> Encoder<T> {
    /// Fresh network with uniform(-1/sqrt(fan), 1/sqrt(fan)) initialization.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let h = config.hidden_dim;
        let bound = 1.0 / (h as f64).sqrt();
        let lstm = (0..config.rnn_layers)
            .map(|l| {
                let input = if l == 0 { config.input_dim() } else { h };
                LstmLayer {
                    w_ih: uniform_matrix(&mut rng, 4 * h, input, bound),
                    w_hh: uniform_matrix(&mut rng, 4 * h, h, bound),
                    b_ih: uniform_vector(&mut rng, 4 * h, bound),
                    b_hh: uniform_vector(&mut rng, 4 * h, bound),
                }
            })
            .collect();
        let hh = config.head_hidden_dim;
        let out = config.output_len();
        let b1 = 1.0 / (h as f64).sqrt();
        let b2 = 1.0 / (hh as f64).sqrt();
        let params = EncoderParams {
            lstm,
            fc1_w: uniform_matrix(&mut rng, hh, h, b1),
            fc1_b: uniform_vector(&mut rng, hh, b1),
            bn_gamma: Array1::ones(hh),
            bn_beta: Array1::zeros(hh),
            fc2_w: uniform_matrix(&mut rng, out, hh, b2),
            fc2_b: uniform_vector(&mut rng, out, b2),
        };
        Ok(Encoder {
            running_mean: Array1::zeros(hh),
            running_var: Array1::ones(hh),
            config,
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, batch: &ArrayView3<'_, T>) -> Result<()> {
        let (_, c, t) = batch.dim();
        if (c, t) != (self.config.n_channels, self.config.n_timesteps) {
            return Err(Error::Shape(format!(
                "encoder expects signals of {}x{} (channels x timesteps), got {c}x{t}",
                self.config.n_channels, self.config.n_timesteps
            )));
        }
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if !batch.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "encoder input".into(),
            });
        }
        Ok(())
    }

    /// Per-step inputs `[L * B, in]`, step-major.
    fn sequence_inputs(&self, batch: &ArrayView3<'_, T>) -> Array2<T> {
        let b = batch.dim().0;
        let (len, input) = (self.config.sequence_len(), self.config.input_dim());
        let mut xs = Array2::zeros((len * b, input));
        for step in 0..len {
            let rows = match self.config.sequence_axis {
                SequenceAxis::Time => batch.slice(s![.., .., step]),
                SequenceAxis::Channel => batch.slice(s![.., step, ..]),
            };
            xs.slice_mut(s![step * b..(step + 1) * b, ..]).assign(&rows);
        }
        xs
    }

    fn forward_impl(&self, batch: ArrayView3<'_, T>, mode: Mode) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_input(&batch)?;
        let b = batch.dim().0;
        if mode == Mode::Train && b < 2 {
            return Err(Error::Shape(
                "training-mode batch normalization needs at least 2 samples per batch".into(),
            ));
        }
        let h = self.config.hidden_dim;
        let len = self.config.sequence_len();
        let mut inputs = self.sequence_inputs(&batch);
        let mut layers = Vec::with_capacity(self.params.lstm.len());
        let mut last_hidden = Array2::zeros((b, h));

        for layer in &self.params.lstm {
            let bias = &layer.b_ih + &layer.b_hh;
            let xw = inputs.dot(&layer.w_ih.t()) + &bias;
            let mut hs = Array2::zeros((len * b, h));
            let mut h_prev_all = Array2::zeros((len * b, h));
            let mut cache = LayerCache {
                inputs: Array2::zeros((0, 0)),
                i: Vec::with_capacity(len),
                f: Vec::with_capacity(len),
                g: Vec::with_capacity(len),
                o: Vec::with_capacity(len),
                c_prev: Vec::with_capacity(len),
                tanh_c: Vec::with_capacity(len),
                h_prev: Array2::zeros((0, 0)),
            };
            let mut h_state = Array2::<T>::zeros((b, h));
            let mut c_state = Array2::<T>::zeros((b, h));
            for step in 0..len {
                let rows = step * b..(step + 1) * b;
                h_prev_all.slice_mut(s![rows.clone(), ..]).assign(&h_state);
                let gates = &xw.slice(s![rows.clone(), ..]) + &h_state.dot(&layer.w_hh.t());
                let i = gates.slice(s![.., 0..h]).mapv(sigmoid);
                let f = gates.slice(s![.., h..2 * h]).mapv(sigmoid);
                let g = gates.slice(s![.., 2 * h..3 * h]).mapv(T::tanh);
                let o = gates.slice(s![.., 3 * h..4 * h]).mapv(sigmoid);
                let c_new = &f * &c_state + &i * &g;
                let tanh_c = c_new.mapv(T::tanh);
                h_state = &o * &tanh_c;
                hs.slice_mut(s![rows, ..]).assign(&h_state);
                cache.i.push(i);
                cache.f.push(f);
                cache.g.push(g);
                cache.o.push(o);
                cache.c_prev.push(std::mem::replace(&mut c_state, c_new));
                cache.tanh_c.push(tanh_c);
            }
            cache.inputs = std::mem::replace(&mut inputs, hs);
            cache.h_prev = h_prev_all;
            last_hidden = h_state;
            layers.push(cache);
        }

        let z1 = last_hidden.dot(&self.params.fc1_w.t()) + &self.params.fc1_b;
        let eps: T = real(self.config.bn_eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = z1.mean_axis(Axis(0)).unwrap();
                let centered = &z1 - &mean;
                let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
                (mean, var)
            }
            Mode::Inference => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = (&z1 - &mean) * &inv_std;
        let bn_out = &xhat * &self.params.bn_gamma + &self.params.bn_beta;
        let slope: T = real(self.config.leaky_slope);
        let activated = bn_out.mapv(|v| if v > T::zero() { v } else { v * slope });
        let out = activated.dot(&self.params.fc2_w.t()) + &self.params.fc2_b;
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "encoder output".into(),
            });
        }
        Ok((
            out,
            ForwardCache {
                mode,
                batch: b,
                layers,
                last_hidden,
                xhat,
                inv_std,
                bn_out,
                activated,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// Inference-mode forward of a single `[channels x timesteps]` signal.
    pub fn forward(&self, signal: ArrayView2<'_, T>) -> Result<Array1<T>> {
        let batch = signal.insert_axis(Axis(0));
        let out = self.forward_batch(batch)?;
        Ok(out.row(0).to_owned())
    }

    /// Inference-mode forward of a `[batch, channels, timesteps]` tensor.
    pub fn forward_batch(&self, batch: ArrayView3<'_, T>) -> Result<Array2<T>> {
        self.forward_impl(batch, Mode::Inference).map(|(out, _)| out)
    }

    /// Forward pass keeping the intermediates for [`Encoder::backward`].
    pub fn forward_with_cache(&self, batch: ArrayView3<'_, T>, mode: Mode) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.forward_impl(batch, mode)
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// statistics (unbiased variance, exponential moving average).
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m: T = real(self.config.bn_momentum);
        let n: T = real(cache.batch as f64);
        let unbiased = cache.batch_var.mapv(|v| v * n / (n - T::one()));
        self.running_mean = self.running_mean.mapv(|v| v * (T::one() - m)) + cache.batch_mean.mapv(|v| v * m);
        self.running_var = self.running_var.mapv(|v| v * (T::one() - m)) + unbiased.mapv(|v| v * m);
    }

    /// Gradient of `sum(grad_out * output)` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Array2<T>) -> EncoderParams<T> {
        let mut grads = self.params.zeros_like();
        let b = cache.batch;
        let bt: T = real(b as f64);

        grads.fc2_w = grad_out.t().dot(&cache.activated);
        grads.fc2_b = grad_out.sum_axis(Axis(0));
        let d_act = grad_out.dot(&self.params.fc2_w);
        let slope: T = real(self.config.leaky_slope);
        let d_bn = ndarray::Zip::from(&d_act)
            .and(&cache.bn_out)
            .map_collect(|&d, &x| if x > T::zero() { d } else { d * slope });
        grads.bn_gamma = (&d_bn * &cache.xhat).sum_axis(Axis(0));
        grads.bn_beta = d_bn.sum_axis(Axis(0));
        let d_xhat = &d_bn * &self.params.bn_gamma;
        let d_z1 = match cache.mode {
            Mode::Inference => &d_xhat * &cache.inv_std,
            Mode::Train => {
                let sum_d = d_xhat.sum_axis(Axis(0));
                let sum_dx = (&d_xhat * &cache.xhat).sum_axis(Axis(0));
                let inner = d_xhat.mapv(|v| v * bt) - &sum_d - &(&cache.xhat * &sum_dx);
                inner * &cache.inv_std.mapv(|v| v / bt)
            }
        };
        grads.fc1_w = d_z1.t().dot(&cache.last_hidden);
        grads.fc1_b = d_z1.sum_axis(Axis(0));

        let h = self.config.hidden_dim;
        let len = self.config.sequence_len();
        // Gradient w.r.t. each step's hidden output of the current layer.
        let mut d_hs = Array2::<T>::zeros((len * b, h));
        d_hs.slice_mut(s![(len - 1) * b.., ..])
            .assign(&d_z1.dot(&self.params.fc1_w));

        for (l, layer) in self.params.lstm.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            let mut d_gates = Array2::<T>::zeros((len * b, 4 * h));
            let mut dh_next = Array2::<T>::zeros((b, h));
            let mut dc_next = Array2::<T>::zeros((b, h));
            for step in (0..len).rev() {
                let rows = step * b..(step + 1) * b;
                let dh = &d_hs.slice(s![rows.clone(), ..]) + &dh_next;
                let (i, f, g, o) = (&lc.i[step], &lc.f[step], &lc.g[step], &lc.o[step]);
                let tanh_c = &lc.tanh_c[step];
                let d_o = &dh * tanh_c;
                let dc = dc_next + &(&dh * o * &tanh_c.mapv(|t| T::one() - t * t));
                let d_i = &dc * g;
                let d_g = &dc * i;
                let d_f = &dc * &lc.c_prev[step];
                dc_next = &dc * f;
                let mut dg = d_gates.slice_mut(s![rows, ..]);
                dg.slice_mut(s![.., 0..h]).assign(&(&d_i * &i.mapv(|v| v * (T::one() - v))));
                dg.slice_mut(s![.., h..2 * h]).assign(&(&d_f * &f.mapv(|v| v * (T::one() - v))));
                dg.slice_mut(s![.., 2 * h..3 * h]).assign(&(&d_g * &g.mapv(|v| T::one() - v * v)));
                dg.slice_mut(s![.., 3 * h..4 * h]).assign(&(&d_o * &o.mapv(|v| v * (T::one() - v))));
                dh_next = dg.dot(&layer.w_hh);
            }
            let gl = &mut grads.lstm[l];
            gl.w_ih = d_gates.t().dot(&lc.inputs);
            gl.w_hh = d_gates.t().dot(&lc.h_prev);
            gl.b_ih = d_gates.sum_axis(Axis(0));
            gl.b_hh = gl.b_ih.clone();
            if l > 0 {
                d_hs = d_gates.dot(&layer.w_ih);
            }
        }
        grads
    }

    /// Reshapes a flat output row into the configured embedding shape.
    pub fn reshape_output(&self, row: Array1<T>) -> Array2<T> {
        let (r, c) = match self.config.output_shape {
            EmbeddingShape::Vector { dim } => (1, dim),
            EmbeddingShape::Grid { tokens, dim } => (tokens, dim),
        };
        row.into_shape_with_order((r, c)).expect("output length fixed by config")
    }

    fn flat_state(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_parameters() + 2 * self.running_mean.len());
        for s in self.params.slices() {
            out.extend(s.iter().map(|v| v.to_f32_lossy()));
        }
        out.extend(self.running_mean.iter().map(|v| v.to_f32_lossy()));
        out.extend(self.running_var.iter().map(|v| v.to_f32_lossy()));
        out
    }

    fn from_flat_state(config: EncoderConfig, values: &[f32]) -> Result<Self> {
        let mut enc = Encoder::<T>::new(config, 0)?;
        let hh = enc.config.head_hidden_dim;
        let expected = enc.num_parameters() + 2 * hh;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "checkpoint holds {} values, config needs {expected}",
                values.len()
            )));
        }
        let mut offset = 0;
        for s in enc.params.slices_mut() {
            for (dst, src) in s.iter_mut().zip(&values[offset..]) {
                *dst = real(*src as f64);
            }
            offset += s.len();
        }
        enc.running_mean = values[offset..offset + hh].iter().map(|v| real(*v as f64)).collect();
        enc.running_var = values[offset + hh..].iter().map(|v| real(*v as f64)).collect();
        Ok(enc)
    }
}

/// Reorders a batch of signals `[[channels x timesteps]]` into `[B, C, T]`.
pub fn stack_signals<T: Real>(signals: &[ArrayView2<'_, T>]) -> Result<Array3<T>> {
    if signals.is_empty() {
        return Ok(Array3::zeros((0, 0, 0)));
    }
    let views: Vec<_> = signals.iter().map(|s| s.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(format!("cannot batch signals: {e}")))
}

pub const ENCODER_CHECKPOINT_KIND: &str = "eeg-encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheckpointHeader {
    pub kind: String,
    pub config: EncoderConfig,
    pub space: Space,
    pub step: u64,
    pub epoch: usize,
    pub extractor_id: String,
}

/// Saved encoder: config header plus f32 parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCheckpoint {
    pub header: EncoderCheckpointHeader,
    pub payload: Vec<f32>,
}

impl EncoderCheckpoint {
    pub fn from_encoder<T: Real>(
        encoder: &Encoder<T>,
        space: Space,
        step: u64,
        epoch: usize,
        extractor_id: &str,
    ) -> Self {
        EncoderCheckpoint {
            header: EncoderCheckpointHeader {
                kind: ENCODER_CHECKPOINT_KIND.into(),
                config: encoder.config.clone(),
                space,
                step,
                epoch,
                extractor_id: extractor_id.to_string(),
            },
            payload: encoder.flat_state(),
        }
    }

    pub fn to_encoder<T: Real>(&self) -> Result<Encoder<T>> {
        Encoder::from_flat_state(self.header.config.clone(), &self.payload)
    }

    pub fn content_hash(&self) -> String {
        content_hash(&self.header, &self.payload)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        Container::new(self.header.clone(), self.payload.clone()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Container<EncoderCheckpointHeader> = Container::load(path)?;
        if c.header.kind != ENCODER_CHECKPOINT_KIND {
            return Err(Error::parse(
                path.display().to_string(),
                format!("not an encoder checkpoint (kind {})", c.header.kind),
            ));
        }
        Ok(EncoderCheckpoint {
            header: c.header,
            payload: c.payload,
        })
    }
}

/// Random perturbation helper used by tests and the determinism harness.
pub fn random_signal<T: Real>(seed: u64, channels: usize, timesteps: usize) -> Array2<T> {
    let mut rng = rng_from_seed(seed);
    Array2::from_shape_fn((channels, timesteps), |_| real(rng.random_range(-1.0..1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            rnn_layers: 2,
            hidden_dim: 4,
            head_hidden_dim: 6,
            ..EncoderConfig::new(3, 5, EmbeddingShape::Vector { dim: 5 })
        }
    }

    #[test]
    fn parameter_count_closed_forms() {
        let cfg = EncoderConfig::new(128, 440, EmbeddingShape::Vector { dim: 1024 });
        let rnn = 4 * (128 * 512 + 512 * 512 + 2 * 512) + 2 * 4 * (512 * 512 + 512 * 512 + 2 * 512);
        let head = (512 * 512 + 512) + 2 * 512 + (512 * 1024 + 1024);
        assert_eq!(cfg.recurrent_parameter_count(), rnn);
        assert_eq!(cfg.head_parameter_count(), head);
        assert_eq!(cfg.parameter_count(), rnn + head);

        let small = EncoderConfig {
            rnn_layers: 1,
            hidden_dim: 1,
            head_hidden_dim: 1,
            ..EncoderConfig::new(1, 3, EmbeddingShape::Vector { dim: 1 })
        };
        assert_eq!(small.recurrent_parameter_count(), 4 * (1 + 1 + 2));
        let enc = Encoder::<f32>::new(small.clone(), 0).unwrap();
        assert_eq!(enc.num_parameters(), small.parameter_count());
        let enc = Encoder::<f32>::new(tiny_config(), 0).unwrap();
        assert_eq!(enc.num_parameters(), tiny_config().parameter_count());
    }

    #[test]
    fn zero_signal_gives_finite_output() {
        let cfg = EncoderConfig {
            rnn_layers: 3,
            hidden_dim: 16,
            head_hidden_dim: 16,
            ..EncoderConfig::new(8, 10, EmbeddingShape::Vector { dim: 12 })
        };
        let enc = Encoder::<f32>::new(cfg, 1).unwrap();
        let out = enc.forward(Array2::zeros((8, 10)).view()).unwrap();
        assert_eq!(out.len(), 12);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let enc = Encoder::<f32>::new(tiny_config(), 1).unwrap();
        let err = enc.forward(Array2::zeros((4, 5)).view()).unwrap_err();
        assert!(err.to_string().contains("3x5"), "{err}");
    }

    #[test]
    fn batch_forward_matches_single_forward() {
        let enc = Encoder::<f32>::new(tiny_config(), 3).unwrap();
        let signals: Vec<Array2<f32>> = (0..7).map(|i| random_signal(i, 3, 5)).collect();
        let views: Vec<_> = signals.iter().map(|s| s.view()).collect();
        let batch = stack_signals(&views).unwrap();
        let out = enc.forward_batch(batch.view()).unwrap();
        for (i, s) in signals.iter().enumerate() {
            let single = enc.forward(s.view()).unwrap();
            for (a, b) in out.row(i).iter().zip(single.iter()) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_sample_training_batch_is_rejected() {
        let enc = Encoder::<f32>::new(tiny_config(), 3).unwrap();
        let batch = Array3::zeros((1, 3, 5));
        assert!(enc.forward_with_cache(batch.view(), Mode::Train).is_err());
    }

    #[test]
    fn grid_output_reshape() {
        let cfg = EncoderConfig {
            rnn_layers: 1,
            hidden_dim: 4,
            head_hidden_dim: 4,
            ..EncoderConfig::new(3, 5, EmbeddingShape::Grid { tokens: 2, dim: 3 })
        };
        let enc = Encoder::<f32>::new(cfg, 1).unwrap();
        let row = enc.forward(random_signal::<f32>(1, 3, 5).view()).unwrap();
        let grid = enc.reshape_output(row.clone());
        assert_eq!(grid.dim(), (2, 3));
        assert_eq!(grid[[1, 0]], row[3]);
    }

    #[test]
    fn channel_axis_orientation_runs() {
        let cfg = EncoderConfig {
            sequence_axis: SequenceAxis::Channel,
            ..tiny_config()
        };
        assert_eq!(cfg.input_dim(), 5);
        let enc = Encoder::<f64>::new(cfg.clone(), 1).unwrap();
        assert_eq!(enc.num_parameters(), cfg.parameter_count());
        assert!(enc.forward(random_signal::<f64>(2, 3, 5).view()).is_ok());
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = Encoder::<f32>::new(tiny_config(), 11).unwrap();
        enc.running_mean.fill(0.25);
        enc.running_var.fill(1.5);
        let x = random_signal::<f32>(4, 3, 5);
        let before = enc.forward(x.view()).unwrap();
        let ckpt = EncoderCheckpoint::from_encoder(&enc, Space::Image, 10, 2, "x");
        let path = dir.path().join("enc.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = EncoderCheckpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let enc2: Encoder<f32> = loaded.to_encoder().unwrap();
        assert_eq!(enc2, enc);
        let after = enc2.forward(x.view()).unwrap();
        let a: Vec<u32> = before.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = after.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}
