//! Nuclei segmentation boosted by self-supervised blind-spot denoising.
//!
//! The crate covers the whole pipeline: dataset ingestion and corruption
//! ([`dataio`]), supervised targets ([`targets`]), a small CPU U-Net with
//! hand-written backpropagation ([`nn`], [`network`]), blind-spot denoiser
//! training ([`denoise`]), segmentation training and the four training
//! schemes ([`segtrain`]), post-processing ([`infer`]) and instance metrics
//! ([`eval`]).

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Plane-wise kernels index several buffers with one counter.
#![allow(clippy::needless_range_loop)]

pub mod dataio;
pub mod denoise;
pub mod error;
pub mod eval;
pub mod infer;
pub mod network;
pub mod nn;
pub mod segtrain;
pub mod targets;

pub use error::{Error, Result};

/// Single-channel real-valued image, indexed `[row, col]`.
pub type RawImage = ndarray::Array2<f32>;

/// Instance label map: `0` is background, every positive id is one object.
pub type InstanceLabelMap = ndarray::Array2<u32>;
