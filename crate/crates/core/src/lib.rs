//! EEG-to-image decoding pipeline.
//!
//! Two recurrent encoders map EEG recordings into an image-embedding space
//! and a text-embedding space. A diffusion backend conditioned on both
//! embeddings through decoupled cross-attention reconstructs the viewed
//! stimulus, and the reconstructions are scored with ACC, IS, FID, SSIM and
//! embedding similarity.

pub mod caption;
pub mod container;
pub mod dataset;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod generation;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod training;

pub use error::{Error, Result};
