//! Platt scaling: fit `u -> family(A u + B)` by holdout negative log-likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{inv_mills, log_normal_cdf, sigmoid, softplus, LinkFunction, LinkKind};

pub const DEFAULT_BOX: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattConfig {
    /// Both parameters are restricted to `[-bound, bound]`.
    pub bound: f64,
    /// Threshold on the projected gradient of the mean NLL.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PlattConfig {
    fn default() -> Self {
        Self { bound: DEFAULT_BOX, tol: 1e-8, max_iter: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattFit {
    pub a: f64,
    pub b: f64,
    pub family: LinkFunction,
    pub nll: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Per-observation NLL in the base argument `z`, with first and second derivatives.
fn base_nll(kind: LinkKind, y: u8, z: f64) -> (f64, f64, f64) {
    match kind {
        LinkKind::Sigmoid => {
            let s = sigmoid(z);
            (softplus(z) - f64::from(y) * z, s - f64::from(y), s * (1.0 - s))
        }
        LinkKind::Probit => {
            // -log Phi(+-z)
            let sz = if y == 1 { z } else { -z };
            let lam = inv_mills(sz);
            let first = if y == 1 { -lam } else { lam };
            (-log_normal_cdf(sz), first, (lam * (sz + lam)).max(0.0))
        }
        LinkKind::ClippedRelu => unreachable!("rejected before fitting"),
    }
}

/// Mean NLL of `family(A u + B)`, its gradient, and the Hessian entries `(AA, AB, BB)`.
pub fn platt_objective(logits: &[f64], labels: &[u8], family: &LinkFunction, a: f64, b: f64) -> (f64, [f64; 2], [f64; 3]) {
    let (fa, fb) = (family.a, family.b);
    let n = logits.len() as f64;
    let (mut f, mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (&u, &y) in logits.iter().zip(labels) {
        let z = fa * (a * u + b) + fb;
        let (v, d1, d2) = base_nll(family.kind, y, z);
        f += v;
        // dz/dA = fa u, dz/dB = fa
        ga += d1 * fa * u;
        gb += d1 * fa;
        let c = d2 * fa * fa;
        haa += c * u * u;
        hab += c * u;
        hbb += c;
    }
    (f / n, [ga / n, gb / n], [haa / n, hab / n, hbb / n])
}

fn projected_grad_norm(p: [f64; 2], g: [f64; 2], bound: f64) -> f64 {
    let mut s = 0.0;
    for k in 0..2 {
        let blocked = (p[k] >= bound && g[k] < 0.0) || (p[k] <= -bound && g[k] > 0.0);
        if !blocked {
            s += g[k] * g[k];
        }
    }
    s.sqrt()
}

/// Fit `(A, B)` by projected damped Newton from `(0, 0)`.
pub fn platt_fit(logits: &[f64], labels: &[u8], family: &LinkFunction, cfg: &PlattConfig) -> Result<PlattFit> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Contract("Platt scaling needs equally many logits and labels".into()));
    }
    if logits.iter().any(|u| !u.is_finite()) {
        return Err(Error::Contract("Platt scaling needs finite logits".into()));
    }
    if family.kind == LinkKind::ClippedRelu {
        return Err(Error::Contract("Platt scaling supports sigmoid and probit families only".into()));
    }
    if family.a == 0.0 {
        return Err(Error::Contract("Platt family must have a nonzero slope".into()));
    }
    let ones = labels.iter().filter(|&&y| y == 1).count();
    if ones == 0 || ones == labels.len() {
        return Err(Error::DegenerateHoldout(format!("all {} holdout labels are identical", labels.len())));
    }

    let bound = cfg.bound;
    let clamp = |p: [f64; 2]| [p[0].clamp(-bound, bound), p[1].clamp(-bound, bound)];
    let mut p = [0.0, 0.0];
    let (mut f, mut g, mut h) = platt_objective(logits, labels, family, p[0], p[1]);
    let mut iterations = 0;
    loop {
        let gn = projected_grad_norm(p, g, bound);
        if gn <= cfg.tol {
            return Ok(PlattFit { a: p[0], b: p[1], family: *family, nll: f, iterations, grad_norm: gn });
        }
        if iterations >= cfg.max_iter {
            return Err(Error::Fit(format!(
                "Platt scaling did not converge in {iterations} iterations: A={}, B={}, |grad|={gn:e}, nll={f}",
                p[0], p[1]
            )));
        }
        let [haa, hab, hbb] = h;
        let det = haa * hbb - hab * hab;
        let newton = if det > 1e-14 * (haa * hbb).max(f64::MIN_POSITIVE) && haa > 0.0 {
            Some([(hbb * g[0] - hab * g[1]) / det, (haa * g[1] - hab * g[0]) / det])
        } else {
            None
        };

        let mut accepted = false;
        for dir in newton.into_iter().chain(std::iter::once(g)) {
            let mut t = 1.0;
            for _ in 0..60 {
                let cand = clamp([p[0] - t * dir[0], p[1] - t * dir[1]]);
                let (fc, gc, hc) = platt_objective(logits, labels, family, cand[0], cand[1]);
                if fc.is_finite() && fc <= f && cand != p {
                    p = cand;
                    f = fc;
                    g = gc;
                    h = hc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if accepted {
                break;
            }
        }
        iterations += 1;
        if !accepted {
            let gn = projected_grad_norm(p, g, bound);
            // No representable decrease left: accept if the gradient is at rounding level.
            if gn <= cfg.tol.max(1e-6) {
                return Ok(PlattFit { a: p[0], b: p[1], family: *family, nll: f, iterations, grad_norm: gn });
            }
            return Err(Error::Fit(format!(
                "Platt line search stalled: A={}, B={}, |grad|={gn:e}, nll={f}",
                p[0], p[1]
            )));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::normal_cdf;
    use crate::rng::seeded;
    use crate::synth::bernoulli_labels;
    use rand::Rng;

    fn grid_oracle(logits: &[f64], labels: &[u8], family: &LinkFunction, center: [f64; 2], half: f64, step: f64) -> [f64; 2] {
        let k = (half / step).round() as i64;
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for i in -k..=k {
            for j in -k..=k {
                let a = center[0] + i as f64 * step;
                let b = center[1] + j as f64 * step;
                let (f, _, _) = platt_objective(logits, labels, family, a, b);
                if f < best.0 {
                    best = (f, [a, b]);
                }
            }
        }
        best.1
    }

    #[test]
    fn uninformative_labels_give_flat_fit() {
        let logits: Vec<f64> = (0..40).map(|i| (i as f64 - 19.5) / 5.0).collect();
        let labels: Vec<u8> = (0..40).map(|i| ((i / 2) % 2) as u8).collect();
        for family in [LinkFunction::standard_sigmoid(), LinkFunction::probit_affine(1.0, 0.0)] {
            let fit = platt_fit(&logits, &labels, &family, &PlattConfig::default()).unwrap();
            let oracle = grid_oracle(&logits, &labels, &family, [0.0, 0.0], 0.3, 1e-3);
            assert!((fit.a - oracle[0]).abs() <= 1e-3 && (fit.b - oracle[1]).abs() <= 1e-3, "{fit:?} {oracle:?}");
            assert!(fit.a.abs() < 0.1 && fit.b.abs() < 0.1);
        }
    }

    #[test]
    fn calibrated_logits_recover_identity() {
        let mut rng = seeded(5);
        let logits: Vec<f64> = (0..20000).map(|_| rng.random_range(-3.0..3.0)).collect();
        for family in [LinkFunction::standard_sigmoid(), LinkFunction::probit_affine(1.3, -0.2)] {
            let labels = bernoulli_labels(logits.iter().map(|&u| family.eval(u)), &mut rng);
            let fit = platt_fit(&logits, &labels, &family, &PlattConfig::default()).unwrap();
            let oracle = grid_oracle(&logits, &labels, &family, [fit.a, fit.b], 0.02, 1e-3);
            assert!((fit.a - oracle[0]).abs() <= 1e-3 && (fit.b - oracle[1]).abs() <= 1e-3);
            assert!((fit.a - 1.0).abs() < 0.1 && fit.b.abs() < 0.1, "{fit:?}");
        }
    }

    #[test]
    fn probit_derivatives_match_finite_differences() {
        let fam = LinkFunction::probit_affine(0.8, 0.3);
        let logits = [-2.0, -0.5, 0.1, 1.4, 3.0, -7.0];
        let labels = [0, 1, 0, 1, 1, 1];
        let (a, b, h) = (0.7, -0.4, 1e-6);
        let (_, g, hess) = platt_objective(&logits, &labels, &fam, a, b);
        let fd_a = (platt_objective(&logits, &labels, &fam, a + h, b).0 - platt_objective(&logits, &labels, &fam, a - h, b).0) / (2.0 * h);
        let fd_b = (platt_objective(&logits, &labels, &fam, a, b + h).0 - platt_objective(&logits, &labels, &fam, a, b - h).0) / (2.0 * h);
        assert!((g[0] - fd_a).abs() < 1e-7 && (g[1] - fd_b).abs() < 1e-7);
        let gb_a = (platt_objective(&logits, &labels, &fam, a + h, b).1[1] - platt_objective(&logits, &labels, &fam, a - h, b).1[1]) / (2.0 * h);
        assert!((hess[1] - gb_a).abs() < 1e-6);
        // tail helper sanity
        assert!((-(normal_cdf(-3.0)).ln() - platt_objective(&[0.0], &[1], &LinkFunction::probit_affine(1.0, -3.0), 0.0, 0.0).0).abs() < 1e-12);
    }

    #[test]
    fn separable_data_stays_in_box() {
        let logits = [-2.0, -1.0, 1.0, 2.0];
        let labels = [0, 0, 1, 1];
        let fit = platt_fit(&logits, &labels, &LinkFunction::standard_sigmoid(), &PlattConfig::default()).unwrap();
        assert!(fit.a <= DEFAULT_BOX && fit.a > 10.0);
    }

    #[test]
    fn degenerate_inputs() {
        let fam = LinkFunction::standard_sigmoid();
        let cfg = PlattConfig::default();
        assert!(matches!(platt_fit(&[1.0, 2.0], &[1, 1], &fam, &cfg), Err(Error::DegenerateHoldout(_))));
        assert!(matches!(platt_fit(&[1.0, f64::NAN], &[1, 0], &fam, &cfg), Err(Error::Contract(_))));
        assert!(platt_fit(&[1.0, 2.0], &[1, 0], &LinkFunction::clipped_relu_affine(3.0, 0.5), &cfg).is_err());
    }
}
