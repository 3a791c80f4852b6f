//! Minimal CPU convolution engine with explicit backward passes.
//!
//! Activations use a channel-major `(C, N, H, W)` layout so that each tap
//! of a 3×3 convolution is one sgemm against a shifted window of the
//! zero-padded input, and per-channel operations (batch norm,
//! concatenation) touch contiguous memory. Everything is single-threaded and bitwise deterministic.

mod adam;
mod gemm;
mod layers;
mod tensor;

pub use adam::Adam;
pub use layers::{BatchNorm, Conv1x1, Conv3x3, ConvBlock, MaxPool2, UpConv2};
pub use tensor::{Buffer, Param, Slot, Tensor};

pub(crate) use gemm::gemm;
