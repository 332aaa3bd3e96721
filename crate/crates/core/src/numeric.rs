//! Scalar abstraction and small numerical helpers shared by the network code.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayView1, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating point type the networks are generic over. Training runs in
/// `f32`; gradient checks instantiate the same code with `f64`.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f32_lossy(self) -> f32;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f32_lossy(self) -> f32 {
        self
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

#[inline]
pub fn real<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Seeded generator for a run.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Index-keyed substream of `seed`. Substreams are independent of each other
/// and of the order in which they are requested.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stable 64-bit key for a string (FNV-1a), used to derive seeds from ids.
pub fn string_key(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn uniform_matrix<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| real(rng.random_range(-bound..=bound)))
}

pub fn uniform_vector<T: Real, R: Rng>(rng: &mut R, len: usize, bound: f64) -> Array1<T> {
    Array1::from_shape_fn(len, |_| real(rng.random_range(-bound..=bound)))
}

pub fn normal_matrix<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        real(z * std)
    })
}

/// Pairwise summation; bounds accumulated roundoff to O(log n).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Layer normalization without affine parameters.
pub fn layer_norm(v: ArrayView1<'_, f64>, eps: f64) -> Array1<f64> {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    v.mapv(|x| (x - mean) * inv)
}

pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.dot(&b) / (na * nb))
}

pub fn all_finite<T: Real>(values: impl IntoIterator<Item = T>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

/// Row-wise softmax, numerically stabilised by the row max.
pub fn softmax_rows<T: Real>(scores: &Array2<T>) -> Array2<T> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn substreams_are_order_independent() {
        let a: u64 = substream(9, 3).random();
        let _: u64 = substream(9, 1).random();
        let b: u64 = substream(9, 3).random();
        assert_eq!(a, b);
        let c: u64 = substream(9, 4).random();
        assert_ne!(a, c);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = array![[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        let p = softmax_rows(&s);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_input() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&v), v.iter().sum::<f64>());
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let v = array![1.0, 2.0, 3.0, 10.0];
        let n = layer_norm(v.view(), 1e-12);
        assert!(n.sum().abs() < 1e-12);
        assert!((n.mapv(|x| x * x).sum() / 4.0 - 1.0).abs() < 1e-9);
    }
}
