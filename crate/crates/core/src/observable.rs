//! Observable estimates of `<w_star, w_hat>_Sigma`, its sign, and the angle between
//! the true and fitted weight vectors.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::sigmoid;
use crate::mestimator::{ridge_curvature, FittedModel};
use crate::synth::Dataset;

/// Denominators at or below this are treated as non-positive.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Per-observation quantities evaluated at the fitted weights.
///
/// `H = (X^T D X + n * lambda / d * I)^{-1}` is never stored; only the leverages
/// `lev_i = D_ii x_i^T H x_i` are kept.
#[derive(Debug, Clone)]
pub struct ObservableIntermediates {
    /// `psi_i = -loss'(y_i, x_i^T w_hat)`.
    pub psi: DVector<f64>,
    /// `D_ii = loss''(y_i, x_i^T w_hat)`.
    pub d_diag: DVector<f64>,
    pub leverage: DVector<f64>,
    /// `(1/n) Tr(D - D X H X^T D)`.
    pub v_hat: f64,
    /// `Tr(X H X^T D)`.
    pub gamma_hat: f64,
    /// `gamma_hat / (n v_hat)`, the per-observation scale used inside the ratio.
    pub gamma: f64,
    /// `||psi||^2 / n`.
    pub r_hat_sq: f64,
    /// `X w_hat`.
    pub logits: DVector<f64>,
}

impl ObservableIntermediates {
    /// Assemble from already computed `psi`, `D`, leverages and logits.
    pub fn from_parts(psi: DVector<f64>, d_diag: DVector<f64>, leverage: DVector<f64>, logits: DVector<f64>) -> Result<Self> {
        let n = psi.len();
        if d_diag.len() != n || leverage.len() != n || logits.len() != n || n == 0 {
            return Err(Error::Contract("intermediate vectors must share a positive length".into()));
        }
        if d_diag.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("curvature weights must be non-negative".into()));
        }
        let nf = n as f64;
        let v_hat = d_diag.iter().zip(leverage.iter()).map(|(&di, &li)| di * (1.0 - li)).sum::<f64>() / nf;
        let gamma_hat = leverage.sum();
        let gamma = if v_hat > 0.0 { gamma_hat / (nf * v_hat) } else { 0.0 };
        let r_hat_sq = psi.norm_squared() / nf;
        Ok(Self { psi, d_diag, leverage, v_hat, gamma_hat, gamma, r_hat_sq, logits })
    }
}

/// Evaluate `psi`, `D` and the leverages of the logistic fit.
///
/// Uses an `n x n` factorization when `d > n` and a `d x d` one otherwise.
pub fn compute_intermediates(data: &Dataset, model: &FittedModel) -> Result<ObservableIntermediates> {
    let (n, d) = data.x.shape();
    if model.w_hat.len() != d {
        return Err(Error::Contract(format!("weights have length {}, design has {d} columns", model.w_hat.len())));
    }
    let x = &data.x;
    let logits = model.logits(x);
    let mut psi = DVector::zeros(n);
    let mut d_diag = DVector::zeros(n);
    for i in 0..n {
        let s = sigmoid(logits[i]);
        psi[i] = f64::from(data.y[i]) - s;
        d_diag[i] = s * (1.0 - s);
    }
    let shift = n as f64 * ridge_curvature(model.config.lambda, d);
    let leverage = leverages(x, &d_diag, shift)?;
    ObservableIntermediates::from_parts(psi, d_diag, leverage, logits)
}

/// `D_ii x_i^T (X^T D X + shift I)^{-1} x_i` for every row.
pub fn leverages(x: &DMatrix<f64>, d_diag: &DVector<f64>, shift: f64) -> Result<DVector<f64>> {
    let (n, d) = x.shape();
    if d > n {
        // diag of B (shift I + B)^{-1} = I - shift (shift I + B)^{-1}, B = D^{1/2} X X^T D^{1/2}
        let root = d_diag.map(|v| v.sqrt());
        let gram = x * x.transpose();
        let mut inner = DMatrix::from_fn(n, n, |i, j| root[i] * gram[(i, j)] * root[j]);
        for i in 0..n {
            inner[(i, i)] += shift;
        }
        let chol = inner
            .cholesky()
            .ok_or_else(|| Error::SingularSystem("observable n x n system is not positive definite".into()))?;
        let inv = chol.inverse();
        Ok(DVector::from_fn(n, |i, _| 1.0 - shift * inv[(i, i)]))
    } else {
        let mut weighted = x.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= d_diag[i];
        }
        let mut h = x.tr_mul(&weighted);
        for j in 0..d {
            h[(j, j)] += shift;
        }
        let chol = h
            .cholesky()
            .ok_or_else(|| Error::SingularSystem("observable d x d system is not positive definite".into()))?;
        // M = H X^T, one column per observation.
        let m = chol.solve(&x.transpose());
        Ok(DVector::from_fn(n, |i, _| d_diag[i] * x.row(i).transpose().dot(&m.column(i))))
    }
}

/// Scalar pieces of the inner-product ratio, kept for inspection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerProductPieces {
    /// `||X w_hat - gamma psi||^2`.
    pub residual_sq: f64,
    /// `psi^T X w_hat`.
    pub psi_dot_logits: f64,
    /// `||Sigma^{-1/2} X^T psi||^2`.
    pub whitened_score_sq: f64,
    pub numerator: f64,
    pub denominator: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerProductEstimate {
    /// Estimate of `<w_star, w_hat>_Sigma^2`.
    pub a_star_sq: f64,
    /// Set when the denominator was non-positive and `||w_hat||_Sigma^2` was substituted.
    pub denominator_flag: bool,
    pub pieces: InnerProductPieces,
}

/// Observable estimate of `<w_star, w_hat>_Sigma^2`.
pub fn inner_product_sq(
    im: &ObservableIntermediates,
    data: &Dataset,
    model: &FittedModel,
    sigma_inv_sqrt: &DMatrix<f64>,
) -> Result<InnerProductEstimate> {
    let (n, d) = data.x.shape();
    if im.psi.len() != n || model.w_hat.len() != d || sigma_inv_sqrt.nrows() != d || sigma_inv_sqrt.ncols() != d {
        return Err(Error::Contract("dimension mismatch between intermediates, data, model and covariance".into()));
    }
    let nf = n as f64;
    let resid = &im.logits - &im.psi * im.gamma;
    let residual_sq = resid.norm_squared();
    let psi_dot_logits = im.psi.dot(&im.logits);
    let whitened_score_sq = (sigma_inv_sqrt * data.x.tr_mul(&im.psi)).norm_squared();
    let v = im.v_hat;

    let top = v / nf * residual_sq + psi_dot_logits / nf - im.gamma * im.r_hat_sq;
    let numerator = top * top;
    let denominator = whitened_score_sq / (nf * nf) + 2.0 * v / nf * psi_dot_logits + v * v / nf * residual_sq
        - d as f64 / nf * im.r_hat_sq;
    let pieces = InnerProductPieces { residual_sq, psi_dot_logits, whitened_score_sq, numerator, denominator };

    if denominator <= DENOMINATOR_FLOOR {
        return Ok(InnerProductEstimate {
            a_star_sq: model.sigma_norm * model.sigma_norm,
            denominator_flag: true,
            pieces,
        });
    }
    Ok(InnerProductEstimate { a_star_sq: numerator / denominator, denominator_flag: false, pieces })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignEstimate {
    /// `+1` or `-1`.
    pub sign: i8,
    /// The correlation sum was exactly zero and `+1` was returned.
    pub tie: bool,
}

/// `sign(sum_i (w_hat^T x_i) y_i)` over holdout rows; zero resolves to `+1`.
pub fn sign_estimate(w_hat: &DVector<f64>, holdout_x: &DMatrix<f64>, holdout_y: &[u8]) -> Result<SignEstimate> {
    if holdout_x.nrows() == 0 {
        return Err(Error::Contract("sign holdout is empty".into()));
    }
    if holdout_x.nrows() != holdout_y.len() || holdout_x.ncols() != w_hat.len() {
        return Err(Error::Contract("sign holdout dimensions do not match the model".into()));
    }
    let u = holdout_x * w_hat;
    Ok(sign_from_projections(u.iter().copied(), holdout_y))
}

/// Same as [`sign_estimate`] given precomputed projections `w_hat^T x_i`.
pub fn sign_from_projections(proj: impl IntoIterator<Item = f64>, y: &[u8]) -> SignEstimate {
    let s: f64 = proj.into_iter().zip(y).map(|(u, &yi)| u * f64::from(yi)).sum();
    if s == 0.0 {
        SignEstimate { sign: 1, tie: true }
    } else if s > 0.0 {
        SignEstimate { sign: 1, tie: false }
    } else {
        SignEstimate { sign: -1, tie: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleEstimate {
    pub a_star_sq: f64,
    pub sign: i8,
    pub cos_clipped: f64,
    pub theta_hat: f64,
    pub denominator_flag: bool,
}

/// Clip `sign * sqrt(max(a_star_sq, 0)) / sigma_norm` to `[-1, 1]` and take its arccos.
pub fn angle_estimate(a_star_sq: f64, sign: i8, sigma_norm: f64) -> Result<AngleEstimate> {
    if !(sigma_norm > 0.0) {
        return Err(Error::DegenerateModel(format!("||w_hat||_Sigma must be positive, got {sigma_norm}")));
    }
    let s = if sign < 0 { -1.0 } else { 1.0 };
    let c = (s * a_star_sq.max(0.0).sqrt() / sigma_norm).clamp(-1.0, 1.0);
    let theta_hat = c.acos().clamp(0.0, PI);
    Ok(AngleEstimate { a_star_sq, sign: if sign < 0 { -1 } else { 1 }, cos_clipped: c, theta_hat, denominator_flag: false })
}
