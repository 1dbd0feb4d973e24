//! Modal-aware interactive enhancement for multimodal classification.
//!
//! Each modality owns a separate MLP trained in alternating phases with
//! sharpness-aware gradients. While modality `j` trains, the weight gradients
//! of its monitored layers are left-multiplied by a matrix built from the
//! activation covariance of its cyclic predecessor, which damps updates
//! along that modality's high-variance input directions. Predictions are
//! combined by late fusion.
//!
//! Module map:
//! - [`linalg`]: dense matrices and the Jacobi eigensolver
//! - [`nn`]: per-modality model, forward pass, cross-entropy, backprop, checkpoints
//! - [`sam`]: sharpness-aware gradient
//! - [`gradmod`]: covariance accumulation and the modification matrix
//! - [`trainer`]: the alternating schedule, SGD and ablation grids
//! - [`data`]: synthetic datasets, the MMD1 format and batching
//! - [`eval`]: fusion, metrics and loss-landscape slices
//! - [`config`]: the `key = value` run configuration

mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradmod;
pub mod linalg;
pub mod nn;
pub mod sam;
pub mod seed;
pub mod trainer;

pub use error::{MieError, Result};

/// Written into every output file's metadata.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
