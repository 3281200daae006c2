//! Robust covariance (shape) estimation from incomplete data under the
//! mixture-of-scaled-Gaussian model.
//!
//! The crate provides EM estimators for full-rank and factor-model shapes,
//! the usual complete-data and imputation baselines, synthetic data
//! generators, low-rank gap filling, and covariance-descriptor learning on
//! the SPD manifold. [`experiments`] ties them together into reproducible
//! benchmark sweeps.

pub mod error;
pub mod estimators;
pub mod experiments;
pub mod impute;
pub mod linalg;
pub mod missing;
pub mod par;
pub mod rng;
pub mod simulate;
pub mod spdml;

pub use error::{Error, Result};
