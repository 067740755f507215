//! Layer-wise early-exit classification for vision encoders.
//!
//! Each intermediate layer gets a per-class diagonal Gaussian over its
//! activations. A sample is assigned to the class whose Gaussian codes it in
//! the fewest bits (the class-rate). The Gaussians come either from a small
//! calibration set or from a learned module that maps class text embeddings
//! to Gaussian parameters.

pub mod actstore;
pub mod cli;
pub mod error;
pub mod evalharness;
pub mod numkernel;
pub mod sampler;
pub mod synthgen;
pub mod tgem;

pub use error::{Error, ErrorClass, Result};
