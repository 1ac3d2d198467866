//! Ridge-penalized logistic M-estimation by damped Newton iteration.
//!
//! Objective: `(1/n) sum_i loss(y_i, x_i^T w) + lambda / (2 d) ||w||^2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{sigmoid, softplus};
use crate::synth::Dataset;

/// Value and first two derivatives of a per-observation loss in the linear index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossDerivatives {
    pub value: f64,
    pub first: f64,
    pub second: f64,
}

/// A convex, twice differentiable loss `u -> loss_y(u)`.
pub trait Loss {
    fn derivatives(&self, y: u8, u: f64) -> LossDerivatives;
}

/// Negative Bernoulli log-likelihood under the standard logistic link.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogisticLoss;

impl Loss for LogisticLoss {
    fn derivatives(&self, y: u8, u: f64) -> LossDerivatives {
        let (value, first, second) = logistic_loss_derivatives(y, u);
        LossDerivatives { value, first, second }
    }
}

/// `(loss, d/du, d^2/du^2)` of `-y log s(u) - (1-y) log(1 - s(u))`.
pub fn logistic_loss_derivatives(y: u8, u: f64) -> (f64, f64, f64) {
    let s = sigmoid(u);
    let value = softplus(u) - f64::from(y) * u;
    (value, s - f64::from(y), s * (1.0 - s))
}

/// Which linear system the Newton step is solved on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewtonSolver {
    /// Primal when `d <= n`, dual otherwise.
    Auto,
    /// `d x d` Hessian.
    Primal,
    /// `n x n` system through the matrix inversion identity.
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Ridge strength; the penalty is `lambda / (2 d) ||w||^2`.
    pub lambda: f64,
    /// Threshold on the Euclidean norm of the objective gradient.
    pub tol: f64,
    pub max_iter: usize,
    pub solver: NewtonSolver,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { lambda: 0.5, tol: 1e-8, max_iter: 100, solver: NewtonSolver::Auto }
    }
}

impl FitConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self { lambda, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub w_hat: DVector<f64>,
    /// `||w_hat||_Sigma`.
    pub sigma_norm: f64,
    pub config: FitConfig,
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
    pub objective: f64,
}

impl FittedModel {
    /// Logits `X w_hat`.
    pub fn logits(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * &self.w_hat
    }
}

/// Curvature of the ridge penalty: `lambda / d`.
pub fn ridge_curvature(lambda: f64, d: usize) -> f64 {
    lambda / d as f64
}

pub fn objective(x: &DMatrix<f64>, y: &[u8], w: &DVector<f64>, lambda: f64) -> f64 {
    let u = x * w;
    objective_from_logits(&u, y, w, lambda)
}

fn objective_from_logits(u: &DVector<f64>, y: &[u8], w: &DVector<f64>, lambda: f64) -> f64 {
    let n = y.len() as f64;
    let data: f64 = u.iter().zip(y).map(|(&ui, &yi)| softplus(ui) - f64::from(yi) * ui).sum();
    data / n + 0.5 * ridge_curvature(lambda, w.len()) * w.norm_squared()
}

pub fn gradient(x: &DMatrix<f64>, y: &[u8], w: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let u = x * w;
    let r = DVector::from_iterator(y.len(), u.iter().zip(y).map(|(&ui, &yi)| sigmoid(ui) - f64::from(yi)));
    x.tr_mul(&r) / y.len() as f64 + w * ridge_curvature(lambda, w.len())
}

/// `X^T D X / n + (lambda / d) I`.
pub fn hessian(x: &DMatrix<f64>, w: &DVector<f64>, lambda: f64) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let u = x * w;
    let mut weighted = x.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        let s = sigmoid(u[i]);
        row *= s * (1.0 - s);
    }
    let mut h = x.tr_mul(&weighted) / n as f64;
    let c = ridge_curvature(lambda, d);
    for j in 0..d {
        h[(j, j)] += c;
    }
    h
}

/// `||w||_Sigma` and whether a (numerically) negative quadratic form was clipped to zero.
pub fn sigma_norm(w: &DVector<f64>, sigma: &DMatrix<f64>) -> (f64, bool) {
    let q = w.dot(&(sigma * w));
    if q < 0.0 {
        (0.0, true)
    } else {
        (q.sqrt(), false)
    }
}

struct NewtonWorkspace<'a> {
    x: &'a DMatrix<f64>,
    /// `X X^T`, only for the dual route.
    gram: Option<DMatrix<f64>>,
    /// `n * lambda / d`.
    shift: f64,
}

impl<'a> NewtonWorkspace<'a> {
    fn new(x: &'a DMatrix<f64>, lambda: f64, solver: NewtonSolver) -> Self {
        let (n, d) = x.shape();
        let dual = match solver {
            NewtonSolver::Auto => d > n,
            NewtonSolver::Primal => false,
            NewtonSolver::Dual => true,
        };
        let gram = dual.then(|| x * x.transpose());
        Self { x, gram, shift: n as f64 * ridge_curvature(lambda, d) }
    }

    /// Solve `(X^T D X + shift I) step = rhs`.
    fn solve(&self, curv: &DVector<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.x;
        match &self.gram {
            None => {
                let mut weighted = x.clone();
                for (i, mut row) in weighted.row_iter_mut().enumerate() {
                    row *= curv[i];
                }
                let mut h = x.tr_mul(&weighted);
                for j in 0..h.nrows() {
                    h[(j, j)] += self.shift;
                }
                let chol = h
                    .cholesky()
                    .ok_or_else(|| Error::SingularSystem("Newton Hessian is not positive definite".into()))?;
                Ok(chol.solve(rhs))
            }
            Some(gram) => {
                // (X^T D X + cI)^{-1} = (1/c) [I - X^T D^{1/2} (cI + D^{1/2} K D^{1/2})^{-1} D^{1/2} X]
                let root = curv.map(|v| v.max(0.0).sqrt());
                let n = gram.nrows();
                let mut inner = DMatrix::from_fn(n, n, |i, j| root[i] * gram[(i, j)] * root[j]);
                for i in 0..n {
                    inner[(i, i)] += self.shift;
                }
                let chol = inner
                    .cholesky()
                    .ok_or_else(|| Error::SingularSystem("dual Newton system is not positive definite".into()))?;
                let t = (x * rhs).component_mul(&root);
                let s = chol.solve(&t).component_mul(&root);
                Ok((rhs - x.tr_mul(&s)) / self.shift)
            }
        }
    }
}

/// One undamped Newton direction at `w` (exposed to compare solver routes).
pub fn newton_direction(x: &DMatrix<f64>, y: &[u8], w: &DVector<f64>, lambda: f64, solver: NewtonSolver) -> Result<DVector<f64>> {
    let ws = NewtonWorkspace::new(x, lambda, solver);
    let u = x * w;
    let curv = u.map(|ui| {
        let s = sigmoid(ui);
        s * (1.0 - s)
    });
    let g = gradient(x, y, w, lambda) * y.len() as f64;
    Ok(-ws.solve(&curv, &g)?)
}

/// Fit the ridge logistic M-estimator starting from `w = 0`.
///
/// Returns `converged = false` (not an error) when `max_iter` is exhausted or the
/// line search stalls before the gradient norm reaches `tol`.
pub fn fit(data: &Dataset, cfg: &FitConfig, sigma: &DMatrix<f64>) -> Result<FittedModel> {
    let (n, d) = data.x.shape();
    if n == 0 {
        return Err(Error::Contract("cannot fit on an empty dataset".into()));
    }
    if !(cfg.lambda > 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::Contract(format!("lambda must be positive, got {}", cfg.lambda)));
    }
    if sigma.nrows() != d || sigma.ncols() != d {
        return Err(Error::Contract(format!("covariance is {}x{}, design has {d} columns", sigma.nrows(), sigma.ncols())));
    }
    let x = &data.x;
    let y = &data.y;
    let ws = NewtonWorkspace::new(x, cfg.lambda, cfg.solver);
    let c = ridge_curvature(cfg.lambda, d);

    let mut w = DVector::<f64>::zeros(d);
    let mut u = DVector::<f64>::zeros(n);
    let mut obj = objective_from_logits(&u, y, &w, cfg.lambda);
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm;

    loop {
        let resid = DVector::from_iterator(n, u.iter().zip(y).map(|(&ui, &yi)| sigmoid(ui) - f64::from(yi)));
        let grad = x.tr_mul(&resid) / n as f64 + &w * c;
        grad_norm = grad.norm();
        if !grad_norm.is_finite() {
            return Err(Error::Fit("gradient became non-finite".into()));
        }
        if grad_norm <= cfg.tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iter {
            break;
        }
        let curv = u.map(|ui| {
            let s = sigmoid(ui);
            s * (1.0 - s)
        });
        let step = ws.solve(&curv, &(&grad * n as f64))?;
        let du = x * &step;

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let w_new = &w - &step * t;
            let u_new = &u - &du * t;
            let obj_new = objective_from_logits(&u_new, y, &w_new, cfg.lambda);
            if !obj_new.is_finite() {
                return Err(Error::Fit("objective became non-finite".into()));
            }
            if obj_new <= obj {
                w = w_new;
                u = u_new;
                obj = obj_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        // Refresh logits from scratch now and then to stop drift from the incremental update.
        if iterations % 10 == 0 {
            u = x * &w;
        }
    }

    let (sigma_norm, _) = sigma_norm(&w, sigma);
    Ok(FittedModel { w_hat: w, sigma_norm, config: *cfg, converged, grad_norm, iterations, objective: obj })
}
