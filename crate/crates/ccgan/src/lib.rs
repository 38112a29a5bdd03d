//! Data, file formats and training driver for the `ccgan` command-line tool.
//!
//! The numerical engine lives in `ccgan-core`; this crate adds what needs
//! `std`: PPM images, dataset manifests, the synthetic shapes dataset,
//! configuration files, checkpoints and the run loop.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod manifest;
pub mod modelspec;
pub mod ppm;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
