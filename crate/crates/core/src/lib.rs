//! Open-world ML benchmark toolkit.
//!
//! A classifier paired with an out-of-distribution detector, evaluated on
//! procedurally generated image families: reverse-mode autodiff, small
//! classifiers and autoencoders, six detectors with TPR-calibrated
//! thresholds, L∞ attacks against the combined system, a corruption suite,
//! and report-producing metrics.

pub mod attacks;
pub mod autodiff;
pub mod corruptions;
pub mod data;
pub mod detectors;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
