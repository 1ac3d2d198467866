//! Angular calibration of high-dimensional logistic regression.
//!
//! Fits a ridge-penalized logistic M-estimator, estimates the angle between the
//! fitted and true weight vectors from observable quantities alone, and turns that
//! angle into calibrated probabilities. Baselines (Platt scaling, isotonic regression)
//! and evaluation tools are included for comparison.

pub mod calibrators;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod link;
pub mod mestimator;
pub mod multiindex;
pub mod observable;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
