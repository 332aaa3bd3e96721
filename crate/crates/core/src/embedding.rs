//! Frozen embedding providers for the image and text target spaces.
//!
//! Pretrained encoders plug in through [`ImageEmbedder`] and [`TextEmbedder`].
//! The stand-in providers are fixed, seeded random projections followed by
//! layer normalization; they make every stage runnable without weights.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingShape;
use crate::numeric::{layer_norm, normal_matrix, rng_from_seed};

pub trait ImageEmbedder: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_image(&self, pixels: &Array3<f32>) -> Result<Array1<f32>>;
}

pub trait TextEmbedder: Send + Sync {
    fn id(&self) -> String;
    /// Shape of the token grid returned by [`TextEmbedder::embed_text`].
    fn tokens(&self) -> usize;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Array2<f32>>;

    fn shape(&self) -> EmbeddingShape {
        EmbeddingShape::Grid {
            tokens: self.tokens(),
            dim: self.dim(),
        }
    }
}

const LN_EPS: f64 = 1e-5;
const GRID: usize = 16;

/// Box-average resample of an `[h, w, 3]` image onto a `grid x grid` grid,
/// flattened row-major with interleaved channels.
pub(crate) fn box_resample(pixels: &Array3<f32>, grid: usize) -> Array1<f64> {
    let (h, w, _) = pixels.dim();
    let mut out = Array1::zeros(grid * grid * 3);
    for gy in 0..grid {
        let y0 = gy * h / grid;
        let y1 = ((gy + 1) * h / grid).max(y0 + 1).min(h);
        for gx in 0..grid {
            let x0 = gx * w / grid;
            let x1 = ((gx + 1) * w / grid).max(x0 + 1).min(w);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += pixels[[y, x, c]] as f64;
                    }
                }
                out[(gy * grid + gx) * 3 + c] = s / n;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandInImageConfig {
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct StandInImageEmbedder {
    config: StandInImageConfig,
    projection: Array2<f64>,
}

impl StandInImageEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let fan_in = GRID * GRID * 3;
        let mut rng = rng_from_seed(seed);
        StandInImageEmbedder {
            config: StandInImageConfig { dim, seed },
            projection: normal_matrix(&mut rng, dim, fan_in, 1.0 / (fan_in as f64).sqrt()),
        }
    }
}

impl StandInImageEmbedder {
    /// Inverse of [`ImageEmbedder::id`].
    pub fn from_id(id: &str) -> Option<Self> {
        let rest = id.strip_prefix("standin-image-v1:d")?;
        let (dim, seed) = rest.split_once(":seed")?;
        Some(Self::new(dim.parse().ok()?, seed.parse().ok()?))
    }
}

impl ImageEmbedder for StandInImageEmbedder {
    fn id(&self) -> String {
        format!("standin-image-v1:d{}:seed{}", self.config.dim, self.config.seed)
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed_image(&self, pixels: &Array3<f32>) -> Result<Array1<f32>> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!("expected an [h, w, 3] image, got [{h}, {w}, {c}]")));
        }
        // Centre pixels so that black and white images do not collapse to the
        // same normalized direction.
        let x = box_resample(pixels, GRID).mapv(|v| v - 0.5);
        let projected = self.projection.dot(&x);
        Ok(layer_norm(projected.view(), LN_EPS).mapv(|v| v as f32))
    }
}

const BAG: usize = 64;
const POS: usize = 8;

#[derive(Debug, Clone)]
pub struct StandInTextEmbedder {
    tokens: usize,
    dim: usize,
    seed: u64,
    projection: Array2<f64>,
}

impl StandInTextEmbedder {
    pub fn new(tokens: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed ^ 0x7e47_0000);
        StandInTextEmbedder {
            tokens,
            dim,
            seed,
            projection: normal_matrix(&mut rng, dim, BAG + POS, 1.0 / ((BAG + POS) as f64).sqrt()),
        }
    }

    /// Bag-of-characters of a caption prefix plus a positional code. Prefixes
    /// grow with `j`; the last token sees the whole caption.
    fn token_features(words: &[&str], j: usize, tokens: usize) -> Array1<f64> {
        let mut f = Array1::<f64>::zeros(BAG + POS);
        if !words.is_empty() {
            let upto = ((j + 1) * words.len()).div_ceil(tokens).clamp(1, words.len());
            for w in &words[..upto] {
                for b in w.bytes() {
                    f[b as usize % BAG] += 1.0;
                }
                f[b' ' as usize % BAG] += 1.0;
            }
            let norm = f.dot(&f).sqrt();
            if norm > 0.0 {
                f.mapv_inplace(|v| v / norm);
            }
        }
        for k in 0..POS / 2 {
            let rate = 1.0 / 10f64.powf(k as f64 / 2.0);
            f[BAG + 2 * k] = 0.5 * (j as f64 * rate).sin();
            f[BAG + 2 * k + 1] = 0.5 * (j as f64 * rate).cos();
        }
        f
    }
}

impl StandInTextEmbedder {
    /// Inverse of [`TextEmbedder::id`]; a `:pooled` suffix is ignored.
    pub fn from_id(id: &str) -> Option<Self> {
        let id = id.strip_suffix(":pooled").unwrap_or(id);
        let rest = id.strip_prefix("standin-text-v1:t")?;
        let (tokens, rest) = rest.split_once(":d")?;
        let (dim, seed) = rest.split_once(":seed")?;
        Some(Self::new(tokens.parse().ok()?, dim.parse().ok()?, seed.parse().ok()?))
    }
}

impl TextEmbedder for StandInTextEmbedder {
    fn id(&self) -> String {
        format!("standin-text-v1:t{}:d{}:seed{}", self.tokens, self.dim, self.seed)
    }

    fn tokens(&self) -> usize {
        self.tokens
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Array2<f32>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut out = Array2::zeros((self.tokens, self.dim));
        for j in 0..self.tokens {
            let projected = self.projection.dot(&Self::token_features(&words, j, self.tokens));
            let normed = layer_norm(projected.view(), LN_EPS);
            out.row_mut(j).assign(&normed.mapv(|v| v as f32));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::class_image;
    use crate::numeric::cosine_similarity;

    #[test]
    fn stand_ins_rebuild_from_their_ids() {
        let img = StandInImageEmbedder::new(24, 9);
        assert_eq!(StandInImageEmbedder::from_id(&img.id()).unwrap().id(), img.id());
        let text = StandInTextEmbedder::new(3, 8, 4);
        let back = StandInTextEmbedder::from_id(&format!("{}:pooled", text.id())).unwrap();
        assert_eq!(back.embed_text("a cat").unwrap(), text.embed_text("a cat").unwrap());
        assert!(StandInTextEmbedder::from_id("clip-vit-l14").is_none());
    }

    #[test]
    fn image_embedding_is_deterministic_and_separates_classes() {
        let e = StandInImageEmbedder::new(32, 5);
        let a = e.embed_image(&class_image(0, 4, 8)).unwrap();
        let b = e.embed_image(&class_image(0, 4, 8)).unwrap();
        let c = e.embed_image(&class_image(1, 4, 8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        let cos = cosine_similarity(a.mapv(f64::from).view(), c.mapv(f64::from).view()).unwrap();
        assert!(cos < 0.95, "{cos}");
        assert!(e.embed_image(&Array3::zeros((4, 4, 2))).is_err());
    }

    #[test]
    fn text_embedding_shape_and_distinctness() {
        let e = StandInTextEmbedder::new(4, 16, 5);
        let a = e.embed_text("an image of red square").unwrap();
        let b = e.embed_text("an image of cyan triangle").unwrap();
        let empty = e.embed_text("").unwrap();
        assert_eq!(a.dim(), (4, 16));
        assert_ne!(a, b);
        assert!(empty.iter().all(|v| v.is_finite()));
        assert_eq!(a, e.embed_text("an image of red square").unwrap());
    }
}
