//! Evaluation metrics: N-way top-K accuracy, Inception Score, Fréchet
//! distance, SSIM and embedding cosine similarity.
//!
//! Classifiers and feature extractors are pluggable; the stand-ins here need
//! no pretrained weights.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{box_resample, ImageEmbedder};
use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, pairwise_mean, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub acc_n: usize,
    pub acc_k: usize,
    pub acc_trials: usize,
    pub is_splits: usize,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub ssim_l: f64,
    pub feature_extractor_id: String,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            acc_n: 50,
            acc_k: 1,
            acc_trials: 40,
            is_splits: 10,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            ssim_l: 1.0,
            feature_extractor_id: String::new(),
            seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(1 <= self.acc_k && self.acc_k < self.acc_n) {
            problems.push(format!("need 1 <= acc_k < acc_n, got k={} n={}", self.acc_k, self.acc_n));
        }
        if self.acc_trials == 0 {
            problems.push("acc_trials must be positive".into());
        }
        if self.is_splits == 0 {
            problems.push("is_splits must be positive".into());
        }
        if self.ssim_window % 2 == 0 {
            problems.push(format!("ssim_window must be odd, got {}", self.ssim_window));
        }
        if !(self.ssim_sigma > 0.0) {
            problems.push("ssim_sigma must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// N-way top-K accuracy with restricted-class ranking.
///
/// For every image and trial, N−1 distractor classes are drawn without
/// replacement from the classes other than the true one; the trial succeeds
/// when the true class ranks within the top K of the N restricted scores.
/// Ties are broken uniformly at random.
pub fn nway_topk_acc(probs: ArrayView2<'_, f64>, true_classes: &[usize], config: &MetricConfig) -> Result<f64> {
    config.validate()?;
    let (n, c) = probs.dim();
    if n == 0 || n != true_classes.len() {
        return Err(Error::Shape(format!("{n} score rows for {} labels", true_classes.len())));
    }
    if c < config.acc_n {
        return Err(Error::Config(format!(
            "{}-way accuracy needs at least {} classes, classifier has {c}",
            config.acc_n, config.acc_n
        )));
    }
    let hits: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let truth = true_classes[i];
            if truth >= c {
                return Err(Error::Shape(format!("label {truth} outside the classifier's {c} classes")));
            }
            let row = probs.row(i);
            let target = row[truth];
            let mut rng = substream(config.seed, i as u64);
            let mut hits = 0;
            for _ in 0..config.acc_trials {
                let (mut above, mut ties) = (0, 0);
                for j in sample(&mut rng, c - 1, config.acc_n - 1) {
                    let class = if j >= truth { j + 1 } else { j };
                    let s = row[class];
                    if s > target {
                        above += 1;
                    } else if s == target {
                        ties += 1;
                    }
                }
                let rank = above + rng.random_range(0..=ties);
                if rank < config.acc_k {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / (n * config.acc_trials) as f64)
}

/// Inception Score over `n_splits` contiguous splits; returns (mean, std)
/// with the population standard deviation.
pub fn inception_score(probs: ArrayView2<'_, f64>, n_splits: usize) -> Result<(f64, f64)> {
    let (n, _) = probs.dim();
    if n_splits == 0 || n < n_splits {
        return Err(Error::Shape(format!("cannot split {n} rows into {n_splits} splits")));
    }
    for (i, row) in probs.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-5 || row.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Shape(format!("row {i} is not a probability vector (sum {sum})")));
        }
    }
    let scores: Vec<f64> = (0..n_splits)
        .map(|k| {
            let part = probs.slice(ndarray::s![k * n / n_splits..(k + 1) * n / n_splits, ..]);
            let marginal = part.mean_axis(Axis(0)).expect("non-empty split");
            let kls: Vec<f64> = part
                .rows()
                .into_iter()
                .map(|row| {
                    row.iter()
                        .zip(marginal.iter())
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, m)| p * (p / m).ln())
                        .sum()
                })
                .collect();
            pairwise_mean(&kls).exp()
        })
        .collect();
    let mean = pairwise_mean(&scores);
    let var = pairwise_mean(&scores.iter().map(|s| (s - mean).powi(2)).collect::<Vec<_>>());
    Ok((mean, var.sqrt()))
}

fn mean_and_covariance(x: ArrayView2<'_, f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centred = &x - &mean;
    let cov = centred.t().dot(&centred) / (n as f64 - 1.0);
    (
        DMatrix::from_iterator(d, 1, mean.iter().copied()),
        DMatrix::from_row_iterator(d, d, cov.iter().copied()),
    )
}

/// Eigendecomposition of the symmetric part of `m`, eigenvalues clipped at 0.
fn clipped_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    eig.eigenvalues.apply(|v| *v = v.max(0.0));
    eig
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = clipped_eigen(m);
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    &eig.eigenvectors * roots * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits (unbiased covariances) of two
/// feature sets.
///
/// `Tr((Σa Σb)^½)` is evaluated as `Tr((Σa^½ Σb Σa^½)^½)`, whose argument is
/// symmetric positive semi-definite, via clipped eigendecompositions.
pub fn frechet_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    let (na, d) = a.dim();
    let (nb, db) = b.dim();
    if d == 0 || d != db {
        return Err(Error::Shape(format!("feature dims {d} and {db} must match and be positive")));
    }
    if na < 2 || nb < 2 {
        return Err(Error::Shape(format!("need at least 2 samples per set, got {na} and {nb}")));
    }
    if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "Fréchet distance features".into(),
        });
    }
    let (mu_a, cov_a) = mean_and_covariance(a);
    let (mu_b, cov_b) = mean_and_covariance(b);
    let diff = (&mu_a - &mu_b).norm_squared();
    let root_a = sqrt_psd(&cov_a);
    let middle = &root_a * &cov_b * &root_a;
    let cross: f64 = clipped_eigen(&middle).eigenvalues.iter().map(|v| v.sqrt()).sum();
    let total = diff + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(total.max(0.0))
}

/// Rec. 601 luma of an `[h, w, 3]` image; single-channel images pass through.
pub fn luma(img: &Array3<f32>) -> Result<Array2<f64>> {
    let (h, w, c) = img.dim();
    match c {
        1 => Ok(Array2::from_shape_fn((h, w), |(y, x)| img[[y, x, 0]] as f64)),
        3 => Ok(Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * img[[y, x, 0]] as f64 + 0.587 * img[[y, x, 1]] as f64 + 0.114 * img[[y, x, 2]] as f64
        })),
        _ => Err(Error::Shape(format!("expected 1 or 3 channels, got {c}"))),
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum();
    Array2::from_shape_fn((size, size), |(y, x)| g[y] * g[x] / (total * total))
}

/// Mean SSIM over all valid window positions of the luma images.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>, config: &MetricConfig) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("SSIM of {:?} and {:?}", a.dim(), b.dim())));
    }
    ssim_gray(&luma(a)?, &luma(b)?, config)
}

pub fn ssim_gray(a: &Array2<f64>, b: &Array2<f64>, config: &MetricConfig) -> Result<f64> {
    let win = config.ssim_window;
    let (h, w) = a.dim();
    if a.dim() != b.dim() {
        return Err(Error::Shape("SSIM inputs differ in shape".into()));
    }
    if h < win || w < win {
        return Err(Error::Shape(format!("image {h}x{w} is smaller than the {win}x{win} SSIM window")));
    }
    let kernel = gaussian_window(win, config.ssim_sigma);
    let c1 = (config.ssim_k1 * config.ssim_l).powi(2);
    let c2 = (config.ssim_k2 * config.ssim_l).powi(2);
    let mut values = Vec::with_capacity((h - win + 1) * (w - win + 1));
    for y in 0..=h - win {
        for x in 0..=w - win {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ((dy, dx), k) in kernel.indexed_iter() {
                let (va, vb) = (a[[y + dy, x + dx]], b[[y + dy, x + dx]]);
                ma += k * va;
                mb += k * vb;
                saa += k * va * va;
                sbb += k * vb * vb;
                sab += k * va * vb;
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            values.push(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    Ok(pairwise_mean(&values))
}

/// Something that assigns class probabilities to an image.
pub trait ImageClassifier: Send + Sync {
    fn id(&self) -> String;
    fn n_classes(&self) -> usize;
    fn class_probs(&self, image: &Array3<f32>) -> Result<Array1<f64>>;
}

/// Nearest-prototype classifier on coarse colour layout: images are pooled
/// to a 4×4 RGB grid and scored by `softmax(−mean_sq_dist / τ)` against the
/// per-class mean of the reference images.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeClassifier {
    pub prototypes: Vec<Array1<f64>>,
    pub temperature: f64,
}

const PROTOTYPE_GRID: usize = 4;

impl PrototypeClassifier {
    pub fn features(image: &Array3<f32>) -> Array1<f64> {
        box_resample(image, PROTOTYPE_GRID)
    }

    pub fn from_examples<'a>(examples: impl IntoIterator<Item = (usize, &'a Array3<f32>)>, n_classes: usize) -> Result<Self> {
        let dim = PROTOTYPE_GRID * PROTOTYPE_GRID * 3;
        let mut sums = vec![Array1::<f64>::zeros(dim); n_classes];
        let mut counts = vec![0usize; n_classes];
        for (class, image) in examples {
            if class >= n_classes {
                return Err(Error::Dataset(format!("class {class} out of range")));
            }
            sums[class] += &Self::features(image);
            counts[class] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Dataset(format!("class {empty} has no reference image")));
        }
        Ok(PrototypeClassifier {
            prototypes: sums.into_iter().zip(counts).map(|(s, c)| s / c as f64).collect(),
            temperature: 0.01,
        })
    }

    pub fn predict(&self, image: &Array3<f32>) -> usize {
        let f = Self::features(image);
        let d: Vec<f64> = self.prototypes.iter().map(|p| (&f - p).mapv(|v| v * v).sum()).collect();
        (0..d.len()).min_by(|&i, &j| d[i].total_cmp(&d[j])).unwrap_or(0)
    }
}

impl ImageClassifier for PrototypeClassifier {
    fn id(&self) -> String {
        format!("prototype-v1:c{}:tau{}", self.prototypes.len(), self.temperature)
    }

    fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    fn class_probs(&self, image: &Array3<f32>) -> Result<Array1<f64>> {
        let f = Self::features(image);
        let logits: Vec<f64> = self
            .prototypes
            .iter()
            .map(|p| -(&f - p).mapv(|v| v * v).mean().unwrap_or(0.0) / self.temperature)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / total).collect())
    }
}

/// A generated image and the stimulus it should reconstruct.
#[derive(Debug, Clone, Copy)]
pub struct ImagePair<'a> {
    pub id: &'a str,
    pub generated: &'a Array3<f32>,
    pub ground_truth: &'a Array3<f32>,
    pub class_id: usize,
}

/// Mean cosine similarity of paired extractor embeddings.
pub fn embedding_similarity(pairs: &[ImagePair<'_>], extractor: &dyn ImageEmbedder) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Shape("no image pairs".into()));
    }
    let sims: Vec<f64> = pairs
        .par_iter()
        .map(|p| {
            let g = extractor.embed_image(p.generated)?.mapv(f64::from);
            let t = extractor.embed_image(p.ground_truth)?.mapv(f64::from);
            cosine_similarity(g.view(), t.view())
                .ok_or_else(|| Error::Shape(format!("zero-norm embedding for image {}", p.id)))
        })
        .collect::<Result<_>>()?;
    Ok(pairwise_mean(&sims))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub ssim: f64,
    pub cs: f64,
    pub n_images: usize,
    pub is_splits: usize,
    pub classifier_id: String,
    pub config: MetricConfig,
}

pub const RESULTS_HEADER: &str = "condition,acc,is_mean,is_std,fid,ssim,cs";

impl MetricReport {
    /// One results-CSV row in the column order of [`RESULTS_HEADER`].
    pub fn csv_row(&self, condition: &str) -> String {
        let mut s = String::new();
        write!(
            s,
            "{condition},{},{},{},{},{},{}",
            self.acc, self.is_mean, self.is_std, self.fid, self.ssim, self.cs
        )
        .unwrap();
        s
    }
}

/// Computes all five metrics over paired images.
///
/// The Inception Score uses `min(is_splits, n)` splits so that small sets
/// remain evaluable; the split count used is recorded in the report.
pub fn evaluate(
    pairs: &[ImagePair<'_>],
    classifier: &dyn ImageClassifier,
    extractor: &dyn ImageEmbedder,
    config: &MetricConfig,
) -> Result<MetricReport> {
    config.validate()?;
    if pairs.len() < 2 {
        return Err(Error::Shape(format!("need at least 2 image pairs, got {}", pairs.len())));
    }
    let c = classifier.n_classes();
    let n = pairs.len();
    let per_image: Vec<(Array1<f64>, Array1<f64>, Array1<f64>, f64)> = pairs
        .par_iter()
        .map(|p| {
            let probs = classifier.class_probs(p.generated)?;
            let fg = extractor.embed_image(p.generated)?.mapv(f64::from);
            let ft = extractor.embed_image(p.ground_truth)?.mapv(f64::from);
            let s = ssim(p.generated, p.ground_truth, config)?;
            Ok((probs, fg, ft, s))
        })
        .collect::<Result<_>>()?;
    let d = per_image[0].1.len();
    let mut probs = Array2::zeros((n, c));
    let mut gen = Array2::zeros((n, d));
    let mut truth = Array2::zeros((n, d));
    for (i, (p, g, t, _)) in per_image.iter().enumerate() {
        probs.row_mut(i).assign(p);
        gen.row_mut(i).assign(g);
        truth.row_mut(i).assign(t);
    }
    let labels: Vec<usize> = pairs.iter().map(|p| p.class_id).collect();
    let splits = config.is_splits.min(n);
    let (is_mean, is_std) = inception_score(probs.view(), splits)?;
    let mut sims = Vec::with_capacity(n);
    for (i, p) in pairs.iter().enumerate() {
        sims.push(
            cosine_similarity(gen.row(i), truth.row(i))
                .ok_or_else(|| Error::Shape(format!("zero-norm embedding for image {}", p.id)))?,
        );
    }
    Ok(MetricReport {
        acc: nway_topk_acc(probs.view(), &labels, config)?,
        is_mean,
        is_std,
        fid: frechet_distance(gen.view(), truth.view())?,
        ssim: pairwise_mean(&per_image.iter().map(|x| x.3).collect::<Vec<_>>()),
        cs: pairwise_mean(&sims),
        n_images: n,
        is_splits: splits,
        classifier_id: classifier.id(),
        config: config.clone(),
    })
}
