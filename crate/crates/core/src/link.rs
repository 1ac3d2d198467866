//! Link functions mapping a linear index to a Bernoulli success probability.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// `sqrt(pi / 8)`: `sigmoid(u) ~= Phi(SIGMOID_PROBIT_SCALE * u)`.
pub const SIGMOID_PROBIT_SCALE: f64 = 0.626_657_068_657_750_1;

/// Standard logistic function, stable for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Inverse Mills ratio `phi(z) / Phi(z)`, accurate in the far left tail.
pub fn inv_mills(z: f64) -> f64 {
    if z > -30.0 {
        normal_pdf(z) / normal_cdf(z)
    } else {
        let t = 1.0 / (z * z);
        -z / (1.0 - t + 3.0 * t * t - 15.0 * t * t * t)
    }
}

/// `log Phi(z)`.
pub fn log_normal_cdf(z: f64) -> f64 {
    if z > -30.0 {
        normal_cdf(z).ln()
    } else {
        let t = 1.0 / (z * z);
        -0.5 * z * z - (-z).ln() - 0.5 * (2.0 * PI).ln() + (1.0 - t + 3.0 * t * t - 15.0 * t * t * t).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Sigmoid,
    Probit,
    ClippedRelu,
}

/// `u -> base(a * u + b)` with `base` one of sigmoid, the normal CDF, or `clip(., 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkFunction {
    pub kind: LinkKind,
    pub a: f64,
    pub b: f64,
}

impl LinkFunction {
    pub fn sigmoid_affine(a: f64, b: f64) -> Self {
        Self { kind: LinkKind::Sigmoid, a, b }
    }

    pub fn probit_affine(a: f64, b: f64) -> Self {
        Self { kind: LinkKind::Probit, a, b }
    }

    pub fn clipped_relu_affine(a: f64, b: f64) -> Self {
        Self { kind: LinkKind::ClippedRelu, a, b }
    }

    /// The standard logistic link used by logistic regression.
    pub fn standard_sigmoid() -> Self {
        Self::sigmoid_affine(1.0, 0.0)
    }

    /// Probit approximation `Phi(sqrt(pi/8) * (a u + b))` of `sigmoid(a u + b)`.
    pub fn probit_bridge(self) -> Self {
        debug_assert_eq!(self.kind, LinkKind::Sigmoid);
        Self::probit_affine(SIGMOID_PROBIT_SCALE * self.a, SIGMOID_PROBIT_SCALE * self.b)
    }

    /// The un-shifted base function.
    pub fn base(&self, z: f64) -> f64 {
        match self.kind {
            LinkKind::Sigmoid => sigmoid(z),
            LinkKind::Probit => normal_cdf(z),
            LinkKind::ClippedRelu => z.clamp(0.0, 1.0),
        }
    }

    pub fn eval(&self, u: f64) -> f64 {
        self.base(self.a * u + self.b)
    }

    /// Derivative of the base function.
    pub fn base_derivative(&self, z: f64) -> f64 {
        match self.kind {
            LinkKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            LinkKind::Probit => normal_pdf(z),
            LinkKind::ClippedRelu => {
                if (0.0..1.0).contains(&z) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.a >= 0.0
    }
}

impl fmt::Display for LinkFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            LinkKind::Sigmoid => "sigmoid",
            LinkKind::Probit => "probit",
            LinkKind::ClippedRelu => "crelu",
        };
        write!(f, "{name}:{}:{}", self.a, self.b)
    }
}

impl FromStr for LinkFunction {
    type Err = Error;

    /// Parses `sigmoid:a:b`, `probit:a:b` or `crelu:a:b`. Bare `sigmoid`/`probit`
    /// mean `a = 1, b = 0`; bare `crelu` means `a = 3, b = 0.5`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let (kind, da, db) = match parts[0] {
            "sigmoid" => (LinkKind::Sigmoid, 1.0, 0.0),
            "probit" => (LinkKind::Probit, 1.0, 0.0),
            "crelu" | "clipped_relu" => (LinkKind::ClippedRelu, 3.0, 0.5),
            other => return Err(Error::Config(format!("unknown link '{other}'"))),
        };
        let num = |t: &str| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("bad link parameter '{t}' in '{s}'")))
        };
        let (a, b) = match parts.len() {
            1 => (da, db),
            3 => (num(parts[1])?, num(parts[2])?),
            _ => return Err(Error::Config(format!("link must look like name:a:b, got '{s}'"))),
        };
        Ok(Self { kind, a, b })
    }
}
