//! Difference-aware decoder (DAD) for binary segmentation.
//!
//! The crate is `no_std` with `alloc`. It carries everything that is pure
//! computation: a small NCHW tensor type with reverse-mode autodiff, the
//! convolution/normalization layers, the backbone adapters, the three decoder
//! stages, the weighted BCE + IoU loss, the evaluation metrics, Adam and the
//! training step. File formats, configuration files and the CLI live in the
//! `dad` crate.
//!
//! # Feature flags
//! - **`std`** (default): lets the matrix kernels detect CPU features at runtime.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod attention;
pub mod autograd;
pub mod backbones;
pub mod blocks;
pub mod decoder;
mod error;
mod kernels;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
