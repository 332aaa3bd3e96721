//! Decoupled cross-attention: a text branch plus a λ-weighted image branch,
//! each an independent scaled-dot-product attention over its own keys and
//! values.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::numeric::{real, softmax_rows, Real};

/// `softmax(Q Kᵀ / √d) V` together with the attention weights.
pub fn scaled_attention<T: Real>(q: ArrayView2<'_, T>, k: ArrayView2<'_, T>, v: ArrayView2<'_, T>) -> Result<(Array2<T>, Array2<T>)> {
    let d = q.ncols();
    if k.ncols() != d {
        return Err(Error::Shape(format!("query dim {d} but key dim {}", k.ncols())));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::Shape(format!("{} keys but {} values", k.nrows(), v.nrows())));
    }
    if k.nrows() == 0 {
        return Err(Error::Shape("attention needs at least one key".into()));
    }
    let scale: T = real(1.0 / (d as f64).sqrt());
    let probs = softmax_rows(&(q.dot(&k.t()) * scale));
    Ok((probs.dot(&v), probs))
}

/// Intermediate values kept for [`decoupled_backward`].
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q: Array2<T>,
    kt: Array2<T>,
    vt: Array2<T>,
    ki: Array2<T>,
    vi: Array2<T>,
    pt: Array2<T>,
    pi: Array2<T>,
    /// Image-branch output before scaling by λ.
    image_out: Array2<T>,
    lambda: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads<T> {
    pub q: Array2<T>,
    pub kt: Array2<T>,
    pub vt: Array2<T>,
    pub ki: Array2<T>,
    pub vi: Array2<T>,
    pub lambda: T,
}

fn check_lambda<T: Real>(lambda: T) -> Result<()> {
    if !lambda.is_finite() {
        return Err(Error::NonFinite {
            context: "image scale λ".into(),
        });
    }
    Ok(())
}

/// `softmax(Q Ktᵀ/√d) Vt + λ · softmax(Q Kiᵀ/√d) Vi`.
///
/// With `λ = 0` the image branch is not evaluated and the result is exactly
/// the text-only attention.
pub fn decoupled_cross_attention<T: Real>(
    q: ArrayView2<'_, T>,
    kt: ArrayView2<'_, T>,
    vt: ArrayView2<'_, T>,
    ki: ArrayView2<'_, T>,
    vi: ArrayView2<'_, T>,
    lambda: T,
) -> Result<Array2<T>> {
    check_lambda(lambda)?;
    let (text, _) = scaled_attention(q, kt, vt)?;
    if lambda == T::zero() {
        check_image_shapes(q, ki, vi, vt.ncols())?;
        return Ok(text);
    }
    let (image, _) = scaled_attention(q, ki, vi)?;
    check_value_dims(vt.ncols(), vi.ncols())?;
    Ok(text + &(image * lambda))
}

fn check_value_dims(text: usize, image: usize) -> Result<()> {
    if text != image {
        return Err(Error::Shape(format!("text values have dim {text} but image values {image}")));
    }
    Ok(())
}

fn check_image_shapes<T: Real>(q: ArrayView2<'_, T>, ki: ArrayView2<'_, T>, vi: ArrayView2<'_, T>, dv: usize) -> Result<()> {
    if ki.ncols() != q.ncols() || ki.nrows() != vi.nrows() || ki.nrows() == 0 {
        return Err(Error::Shape(format!(
            "image keys [{} x {}] / values [{} x {}] do not fit queries of dim {}",
            ki.nrows(),
            ki.ncols(),
            vi.nrows(),
            vi.ncols(),
            q.ncols()
        )));
    }
    check_value_dims(dv, vi.ncols())
}

/// Forward pass that keeps what the backward pass needs. Both branches are
/// always evaluated so that `∂/∂λ` is available even at `λ = 0`.
pub fn decoupled_forward<T: Real>(
    q: ArrayView2<'_, T>,
    kt: ArrayView2<'_, T>,
    vt: ArrayView2<'_, T>,
    ki: ArrayView2<'_, T>,
    vi: ArrayView2<'_, T>,
    lambda: T,
) -> Result<(Array2<T>, AttentionCache<T>)> {
    check_lambda(lambda)?;
    let (text, pt) = scaled_attention(q, kt, vt)?;
    let (image, pi) = scaled_attention(q, ki, vi)?;
    check_value_dims(vt.ncols(), vi.ncols())?;
    let out = if lambda == T::zero() {
        text
    } else {
        text + &(&image * lambda)
    };
    Ok((
        out,
        AttentionCache {
            q: q.to_owned(),
            kt: kt.to_owned(),
            vt: vt.to_owned(),
            ki: ki.to_owned(),
            vi: vi.to_owned(),
            pt,
            pi,
            image_out: image,
            lambda,
        },
    ))
}

/// Gradients of one attention branch given the upstream gradient of its
/// output: returns (dQ, dK, dV).
fn branch_backward<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    p: &Array2<T>,
    dout: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let scale: T = real(1.0 / (q.ncols() as f64).sqrt());
    let dv = p.t().dot(&dout);
    let dp = dout.dot(&v.t());
    let row_dot: Array1<T> = (&dp * p).sum_axis(Axis(1));
    let ds = (dp - &row_dot.insert_axis(Axis(1))) * p * scale;
    (ds.dot(k), ds.t().dot(q), dv)
}

/// Backward pass of [`decoupled_forward`]: the gradient of
/// `sum(grad_out ⊙ output)` with respect to every input and λ.
pub fn decoupled_backward<T: Real>(cache: &AttentionCache<T>, grad_out: ArrayView2<'_, T>) -> AttentionGrads<T> {
    let (dq_t, dkt, dvt) = branch_backward(&cache.q, &cache.kt, &cache.vt, &cache.pt, grad_out);
    let d_image = grad_out.mapv(|g| g * cache.lambda);
    let (dq_i, dki, dvi) = branch_backward(&cache.q, &cache.ki, &cache.vi, &cache.pi, d_image.view());
    let lambda = (&cache.image_out * &grad_out).sum();
    AttentionGrads {
        q: dq_t + &dq_i,
        kt: dkt,
        vt: dvt,
        ki: dki,
        vi: dvi,
        lambda,
    }
}

/// Adapter-style projection of a global image embedding to `n_tokens`
/// conditioning tokens: `reshape(W e + b, [n_tokens, d])`.
pub fn project_image_embedding<T: Real>(
    e: ArrayView1<'_, T>,
    weight: ArrayView2<'_, T>,
    bias: ArrayView1<'_, T>,
    n_tokens: usize,
) -> Result<Array2<T>> {
    if weight.ncols() != e.len() || weight.nrows() != bias.len() {
        return Err(Error::Shape(format!(
            "projector [{} x {}] with bias {} cannot map an embedding of dim {}",
            weight.nrows(),
            weight.ncols(),
            bias.len(),
            e.len()
        )));
    }
    if n_tokens == 0 || weight.nrows() % n_tokens != 0 {
        return Err(Error::Shape(format!(
            "projector output {} is not divisible into {n_tokens} tokens",
            weight.nrows()
        )));
    }
    let flat = weight.dot(&e) + bias;
    let d = flat.len() / n_tokens;
    Ok(flat.into_shape_with_order((n_tokens, d)).expect("contiguous"))
}
