//! Maps from a fitted logit `u = w_hat^T x` to a probability.

pub mod angular;
pub mod isotonic;
pub mod platt;
pub mod quadrature;

use serde::{Deserialize, Serialize};

pub use angular::{angular_predict, chance_value, clipped_closed_form, probit_closed_form, theoretical_ab, AngularPredictor, LinkExpectation};
pub use isotonic::{isotonic_fit, IsotonicStep};
pub use platt::{platt_fit, platt_objective, PlattConfig, PlattFit};
pub use quadrature::{gauss_hermite, IntegratorCfg, NormalRule};

use crate::error::Result;
use crate::link::LinkFunction;

/// Serializable description of a recalibration map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibrator {
    /// `link(u)` as if the logit were the true index.
    Uncalibrated { link: LinkFunction },
    Angular { theta: f64, sigma_norm: f64, link: LinkFunction, integrator: IntegratorCfg },
    Platt {
        #[serde(rename = "A")]
        a: f64,
        #[serde(rename = "B")]
        b: f64,
        family: LinkFunction,
    },
    Isotonic { breakpoints: Vec<f64>, values: Vec<f64> },
    /// The constant `E link(Z)`.
    Chance { link: LinkFunction, integrator: IntegratorCfg },
}

impl Calibrator {
    pub fn name(&self) -> &'static str {
        match self {
            Calibrator::Uncalibrated { .. } => "uncalibrated",
            Calibrator::Angular { .. } => "angular",
            Calibrator::Platt { .. } => "platt",
            Calibrator::Isotonic { .. } => "isotonic",
            Calibrator::Chance { .. } => "chance",
        }
    }

    pub fn from_platt(fit: &PlattFit) -> Self {
        Calibrator::Platt { a: fit.a, b: fit.b, family: fit.family }
    }

    pub fn from_isotonic(step: IsotonicStep) -> Self {
        Calibrator::Isotonic { breakpoints: step.breakpoints, values: step.values }
    }

    /// Validate parameters and precompute whatever evaluation needs.
    pub fn prepare(&self) -> Result<PreparedCalibrator> {
        Ok(match self {
            Calibrator::Uncalibrated { link } => PreparedCalibrator::Link(*link),
            Calibrator::Angular { theta, sigma_norm, link, integrator } => {
                PreparedCalibrator::Angular(AngularPredictor::new(*theta, *sigma_norm, *link, integrator)?)
            }
            Calibrator::Platt { a, b, family } => PreparedCalibrator::Affine { a: *a, b: *b, family: *family },
            Calibrator::Isotonic { breakpoints, values } => {
                PreparedCalibrator::Isotonic(IsotonicStep::new(breakpoints.clone(), values.clone())?)
            }
            Calibrator::Chance { link, integrator } => PreparedCalibrator::Constant(chance_value(link, integrator)?),
        })
    }

    /// Probability for a single logit.
    pub fn calibrate(&self, u: f64) -> Result<f64> {
        Ok(self.prepare()?.eval(u))
    }
}

/// A calibrator ready for repeated evaluation.
#[derive(Debug, Clone)]
pub enum PreparedCalibrator {
    Link(LinkFunction),
    Angular(AngularPredictor),
    Affine { a: f64, b: f64, family: LinkFunction },
    Isotonic(IsotonicStep),
    Constant(f64),
}

impl PreparedCalibrator {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            PreparedCalibrator::Link(link) => link.eval(u),
            PreparedCalibrator::Angular(p) => p.predict(u),
            PreparedCalibrator::Affine { a, b, family } => family.eval(a * u + b),
            PreparedCalibrator::Isotonic(s) => s.eval(u),
            PreparedCalibrator::Constant(c) => *c,
        }
    }

    pub fn eval_many(&self, logits: &[f64]) -> Vec<f64> {
        logits.iter().map(|&u| self.eval(u)).collect()
    }
}
