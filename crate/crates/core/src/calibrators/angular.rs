//! The angular predictor `u -> E_Z link(cos(theta) u / ||w_hat||_Sigma + sin(theta) Z)`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::link::{normal_cdf, normal_pdf, LinkFunction, LinkKind};

use super::quadrature::{IntegratorCfg, NormalRule};

/// `E Phi(mu + s Z) = Phi(mu / sqrt(1 + s^2))`.
pub fn probit_closed_form(mu: f64, s: f64) -> f64 {
    normal_cdf(mu / (1.0 + s * s).sqrt())
}

/// `E clip(mu + s Z, 0, 1)` for `Z ~ N(0, 1)`, using `clip(x, 0, 1) = x_+ - (x - 1)_+`.
pub fn clipped_closed_form(mu: f64, s: f64) -> f64 {
    if s == 0.0 {
        return mu.clamp(0.0, 1.0);
    }
    let positive_part = |m: f64| m * normal_cdf(m / s) + s * normal_pdf(m / s);
    (positive_part(mu) - positive_part(mu - 1.0)).clamp(0.0, 1.0)
}

/// Precomputed evaluator of `t -> E_Z link(t + s Z)` for a fixed noise scale `s`.
#[derive(Debug, Clone)]
pub struct LinkExpectation {
    link: LinkFunction,
    scale: f64,
    rule: Option<Arc<NormalRule>>,
}

impl LinkExpectation {
    pub fn new(link: LinkFunction, scale: f64, integrator: &IntegratorCfg) -> Result<Self> {
        if matches!(integrator, IntegratorCfg::ClosedForm) && link.kind == LinkKind::Sigmoid {
            return Err(Error::UnsupportedClosedForm(format!("no closed form for {link}")));
        }
        let rule = NormalRule::for_integrator(integrator)?;
        Ok(Self { link, scale, rule })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let v = match &self.rule {
            None => {
                let (a, b) = (self.link.a, self.link.b);
                match self.link.kind {
                    LinkKind::Probit => probit_closed_form(a * t + b, a * self.scale),
                    LinkKind::ClippedRelu => clipped_closed_form(a * t + b, (a * self.scale).abs()),
                    LinkKind::Sigmoid => unreachable!("rejected in the constructor"),
                }
            }
            Some(rule) => {
                if self.scale == 0.0 {
                    self.link.eval(t)
                } else {
                    rule.expect(|z| self.link.eval(t + self.scale * z))
                }
            }
        };
        v.clamp(0.0, 1.0)
    }
}

/// Angular predictor with a fixed angle; build once, evaluate many logits.
#[derive(Debug, Clone)]
pub struct AngularPredictor {
    pub theta: f64,
    pub sigma_norm: f64,
    slope: f64,
    inner: LinkExpectation,
}

impl AngularPredictor {
    pub fn new(theta: f64, sigma_norm: f64, link: LinkFunction, integrator: &IntegratorCfg) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::Contract(format!("angle must lie in [0, pi], got {theta}")));
        }
        if !(sigma_norm > 0.0 && sigma_norm.is_finite()) {
            return Err(Error::DegenerateModel(format!("||w_hat||_Sigma must be positive, got {sigma_norm}")));
        }
        let (s, c) = theta.sin_cos();
        Ok(Self { theta, sigma_norm, slope: c / sigma_norm, inner: LinkExpectation::new(link, s, integrator)? })
    }

    pub fn predict(&self, u: f64) -> f64 {
        self.inner.eval(self.slope * u)
    }
}

/// One-off evaluation of the angular predictor at logit `u`.
pub fn angular_predict(u: f64, theta: f64, sigma_norm: f64, link: &LinkFunction, integrator: &IntegratorCfg) -> Result<f64> {
    Ok(AngularPredictor::new(theta, sigma_norm, *link, integrator)?.predict(u))
}

/// The constant `E link(Z)`.
pub fn chance_value(link: &LinkFunction, integrator: &IntegratorCfg) -> Result<f64> {
    Ok(LinkExpectation::new(*link, 1.0, integrator)?.eval(0.0))
}

/// Slope and intercept `(A, B)` for which `link(A u + B)` equals the angular predictor of a
/// probit link `Phi(a x + b)`:
/// `A = cos / (||w_hat|| sqrt(1 + a^2 sin^2))`, `B = (b / a) (1 / sqrt(1 + a^2 sin^2) - 1)`.
pub fn theoretical_ab(theta: f64, sigma_norm: f64, a: f64, b: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    let root = (1.0 + a * a * s * s).sqrt();
    let big_a = c / (sigma_norm * root);
    let big_b = if a == 0.0 { 0.0 } else { b / a * (1.0 / root - 1.0) };
    (big_a, big_b)
}
