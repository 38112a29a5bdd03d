//! Training engine for context-conditional generative adversarial networks.
//!
//! The crate is `no_std` + `alloc`. It contains the pure numerical pieces:
//! tensors with a reverse-mode autodiff [`Tape`], the Adam optimizer, mask
//! sampling and in-painting composition, the generator and two-headed
//! discriminator, the adversarial/classification objectives, evaluation
//! metrics, and a single alternating training step. File formats, the data
//! pipeline and the command-line driver live in the `ccgan` crate.
//!
//! Enable the `std` feature (on by default) to get runtime CPU feature
//! detection in the matrix-multiply backend.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
mod error;
pub mod gradcheck;
mod kernels;
pub mod masking;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod optim;
mod scalar;
mod tape;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Activation, Gradients, Normalization, RunningStats, Tape, Var};
pub use tensor::Tensor;
pub use kernels::{ConvGeometry, conv_output_size, conv_transpose_output_size};

/// Whether a network runs with batch statistics and dropout, or frozen for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}
