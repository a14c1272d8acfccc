//! Semi-supervised multi-view latent-variable modeling.
//!
//! The crate trains a single generative-discriminative model on data with
//! arbitrarily missing views and mostly missing labels: per-view Gaussian
//! encoders fused by a product of experts, per-view decoders, a predictor on
//! the fused latent, and a contrastive cross-view mutual-information
//! regularizer. It also ships the comparison baselines, synthetic dataset
//! generators, metrics, and an experiment harness used by the `mvsemi` CLI.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod losses;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod train;

pub use error::{Error, Result};

/// Code version recorded in manifests: crate version plus `git describe`
/// output when the build ran inside a git checkout.
pub fn code_version() -> String {
    match option_env!("MVSEMI_GIT_DESCRIBE") {
        Some(desc) if !desc.is_empty() => format!("{} ({desc})", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}
