//! Multi-scale residual image denoiser with joint-loss cascade training.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`tape`], [`ops`], [`param`], [`optim`]: a small dense tensor
//!   type with a reverse-mode tape, the differentiable operations the networks
//!   need, trainable parameters and plain SGD.
//! - [`layers`]: convolution / batch-norm / linear building blocks.
//! - [`denoiser`]: the encoder/decoder denoising network with its long skip.
//! - [`highlevel`]: toy classification and segmentation heads that can be frozen.
//! - [`cascade`]: denoiser feeding a frozen head, trained on the joint loss.
//! - [`data`], [`metrics`], [`checkpoint`], [`report`]: I/O and evaluation.

pub mod cascade;
pub mod checkpoint;
pub mod data;
pub mod denoiser;
mod error;
pub mod highlevel;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod param;
pub mod report;
mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
