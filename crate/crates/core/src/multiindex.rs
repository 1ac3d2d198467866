//! Angular calibration when labels depend on several linear indices `G = W_star^T x`
//! and the classifier exposes several fitted indices `W_hat^T x`.
//!
//! With `S = D^{-1} W_hat^T x` (each column normalized to unit `Sigma`-norm),
//! `G | S ~ N(M S, Sigma_c)` where `M = C R^{-1}` and `Sigma_c = Cov(G) - C R^{-1} C^T`,
//! and the calibrated prediction is `E_Z g(M s + L Z)` with `L L^T = Sigma_c`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibrators::{gauss_hermite, IntegratorCfg, LinkExpectation, NormalRule};
use crate::error::{Error, Result};
use crate::linalg::psd_cholesky;
use crate::link::LinkFunction;
use crate::rng::seeded;
use crate::synth::bernoulli_labels;

/// Smallest eigenvalue of `R` accepted as invertible.
pub const MIN_R_EIGENVALUE: f64 = 1e-10;
pub const DEFAULT_TENSOR_NODES: usize = 32;
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
pub const MAX_TENSOR_DIM: usize = 3;

/// The map `g` from the `K` true indices to a probability (or probability vector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndexLink {
    /// `(1/K) sum_k link_k(g_k)`.
    Additive { links: Vec<LinkFunction> },
    /// Softmax over `(g_1, ..., g_K)`; vector valued.
    Softmax,
    Constant { value: f64 },
}

impl IndexLink {
    pub fn is_scalar(&self) -> bool {
        !matches!(self, IndexLink::Softmax)
    }

    /// Output dimension for `k` indices.
    pub fn output_dim(&self, k: usize) -> usize {
        if self.is_scalar() {
            1
        } else {
            k
        }
    }

    pub fn eval_into(&self, g: &[f64], out: &mut [f64]) {
        match self {
            IndexLink::Additive { links } => {
                let s: f64 = links.iter().zip(g).map(|(l, &v)| l.eval(v)).sum();
                out[0] = s / links.len() as f64;
            }
            IndexLink::Softmax => {
                let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (o, &v) in out.iter_mut().zip(g) {
                    *o = (v - m).exp();
                    total += *o;
                }
                out.iter_mut().for_each(|o| *o /= total);
            }
            IndexLink::Constant { value } => out[0] = *value,
        }
    }

    pub fn eval(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim(g.len())];
        self.eval_into(g, &mut out);
        out
    }

    /// Scalar value; errors for vector-valued links.
    pub fn eval_scalar(&self, g: &[f64]) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Contract("index link is vector valued".into()));
        }
        Ok(self.eval(g)[0])
    }
}

#[derive(Debug, Clone)]
pub struct MultiIndexModel {
    /// `d x K`.
    pub w_star: DMatrix<f64>,
    /// `d x K`.
    pub w_hat: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub g: IndexLink,
}

impl MultiIndexModel {
    pub fn new(w_star: DMatrix<f64>, w_hat: DMatrix<f64>, sigma: DMatrix<f64>, g: IndexLink) -> Result<Self> {
        let (d, k) = w_star.shape();
        if k == 0 || w_hat.shape() != (d, k) || sigma.shape() != (d, d) {
            return Err(Error::Contract("index matrices must both be d x K with K >= 1 and Sigma d x d".into()));
        }
        if let IndexLink::Additive { links } = &g {
            if links.len() != k {
                return Err(Error::Contract(format!("additive link has {} components for K = {k}", links.len())));
            }
        }
        Ok(Self { w_star, w_hat, sigma, g })
    }

    pub fn k(&self) -> usize {
        self.w_star.ncols()
    }

    /// `D = diag(||w_hat_k||_Sigma)`.
    pub fn column_norms(&self) -> DVector<f64> {
        let sw = &self.sigma * &self.w_hat;
        DVector::from_fn(self.k(), |j, _| self.w_hat.column(j).dot(&sw.column(j)).max(0.0).sqrt())
    }

    /// `S = D^{-1} W_hat^T x` for every row of `x` (an `n x K` matrix).
    pub fn normalized_logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let norms = self.column_norms();
        let mut s = x * &self.w_hat;
        for (j, mut col) in s.column_iter_mut().enumerate() {
            col /= norms[j];
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalParams {
    /// `Cov(G) = W_star^T Sigma W_star`.
    pub cov_g: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub m_star: DMatrix<f64>,
    /// After projection onto the PSD cone.
    pub sigma_star: DMatrix<f64>,
    /// Lower triangular with `L L^T = sigma_star`.
    pub l_star: DMatrix<f64>,
    /// Set when the projection removed a negative eigenvalue larger than `1e-8 * Tr Cov(G)`.
    pub psd_flag: bool,
}

/// Conditional mean map and covariance of `G` given `S`.
pub fn conditional_params(model: &MultiIndexModel) -> Result<ConditionalParams> {
    let k = model.k();
    let norms = model.column_norms();
    if let Some(j) = norms.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateModel(format!("fitted index {j} has zero Sigma-norm")));
    }
    let dinv = DMatrix::from_diagonal(&norms.map(|v| 1.0 / v));
    let sw_hat = &model.sigma * &model.w_hat;
    let cov_g = model.w_star.transpose() * (&model.sigma * &model.w_star);
    let r = &dinv * model.w_hat.transpose() * &sw_hat * &dinv;
    let r = (&r + r.transpose()) * 0.5;
    let c = model.w_star.transpose() * &sw_hat * &dinv;

    let min_eig = r.symmetric_eigenvalues().min();
    if min_eig < MIN_R_EIGENVALUE {
        return Err(Error::CollinearIndices(format!("normalized fitted Gram matrix has eigenvalue {min_eig:e}")));
    }
    let chol = r.clone().cholesky().ok_or_else(|| Error::CollinearIndices("normalized fitted Gram matrix is not positive definite".into()))?;
    // M = C R^{-1}  <=>  R M^T = C^T
    let m_star = chol.solve(&c.transpose()).transpose();
    let raw = &cov_g - &m_star * c.transpose();
    let raw = (&raw + raw.transpose()) * 0.5;

    // Eigenvalues that are negative or at rounding level relative to Cov(G) are set to zero.
    let scale = cov_g.trace().abs().max(f64::MIN_POSITIVE);
    let eig = SymmetricEigen::new(raw.clone());
    let most_negative = eig.eigenvalues.iter().copied().fold(0.0, f64::min);
    let psd_flag = -most_negative > 1e-8 * scale;
    let floor = 1e-14 * scale;
    let sigma_star = if eig.eigenvalues.iter().any(|&v| v <= floor) {
        let floored = eig.eigenvalues.map(|v| if v <= floor { 0.0 } else { v });
        let p = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
        (&p + p.transpose()) * 0.5
    } else {
        raw
    };
    let l_star = psd_cholesky(&sigma_star, 1e-12);
    debug_assert_eq!(l_star.nrows(), k);
    Ok(ConditionalParams { cov_g, r, c, m_star, sigma_star, l_star, psd_flag })
}

/// How the `K`-variate Gaussian expectation is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MultiIntegrator {
    /// Tensor-product Gauss-Hermite, `nodes` per dimension (K <= 3).
    TensorGaussHermite { nodes: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for MultiIntegrator {
    fn default() -> Self {
        MultiIntegrator::TensorGaussHermite { nodes: DEFAULT_TENSOR_NODES }
    }
}

#[derive(Debug, Clone)]
enum Evaluator {
    /// Additive links only need the marginal of each noise coordinate.
    Marginal(Vec<LinkExpectation>),
    Cubature { points: Vec<DVector<f64>>, weights: Vec<f64> },
}

/// Multi-index angular predictor with fixed parameters.
#[derive(Debug, Clone)]
pub struct MultiAngularPredictor {
    pub m_star: DMatrix<f64>,
    pub l_star: DMatrix<f64>,
    pub g: IndexLink,
    /// The requested tensor rule was replaced by Monte Carlo because `K > 3`.
    pub fell_back_to_mc: bool,
    eval: Evaluator,
}

impl MultiAngularPredictor {
    pub fn new(params: &ConditionalParams, g: &IndexLink, integrator: &MultiIntegrator) -> Result<Self> {
        let k = params.m_star.nrows();
        let mut fell_back_to_mc = false;
        let eval = match (g, integrator) {
            (IndexLink::Additive { links }, MultiIntegrator::TensorGaussHermite { nodes }) => {
                let cfg = IntegratorCfg::GaussHermite { nodes: (*nodes).max(crate::calibrators::quadrature::DEFAULT_GH_NODES) };
                let marg = links
                    .iter()
                    .enumerate()
                    .map(|(j, l)| LinkExpectation::new(*l, params.sigma_star[(j, j)].max(0.0).sqrt(), &cfg))
                    .collect::<Result<Vec<_>>>()?;
                Evaluator::Marginal(marg)
            }
            _ => {
                let (rule_pts, rule_w) = match *integrator {
                    MultiIntegrator::TensorGaussHermite { nodes } if k <= MAX_TENSOR_DIM => {
                        if nodes < 2 {
                            return Err(Error::Config(format!("tensor rule needs at least 2 nodes, got {nodes}")));
                        }
                        tensor_rule(&gauss_hermite(nodes), k)
                    }
                    MultiIntegrator::TensorGaussHermite { .. } => {
                        fell_back_to_mc = true;
                        mc_rule(k, DEFAULT_MC_SAMPLES, 0)
                    }
                    MultiIntegrator::MonteCarlo { samples, seed } => {
                        if samples < crate::calibrators::quadrature::MIN_MC_SAMPLES {
                            return Err(Error::Config(format!("Monte Carlo needs at least 1000 samples, got {samples}")));
                        }
                        mc_rule(k, samples, seed)
                    }
                };
                let points = rule_pts.into_iter().map(|z| &params.l_star * z).collect();
                Evaluator::Cubature { points, weights: rule_w }
            }
        };
        Ok(Self { m_star: params.m_star.clone(), l_star: params.l_star.clone(), g: g.clone(), fell_back_to_mc, eval })
    }

    pub fn output_dim(&self) -> usize {
        self.g.output_dim(self.m_star.nrows())
    }

    /// `E_Z g(M s + L Z)`.
    pub fn predict(&self, s: &[f64]) -> Vec<f64> {
        let k = self.m_star.nrows();
        let mean = &self.m_star * DVector::from_column_slice(s);
        match &self.eval {
            Evaluator::Marginal(marg) => {
                let total: f64 = marg.iter().enumerate().map(|(j, e)| e.eval(mean[j])).sum();
                vec![total / k as f64]
            }
            Evaluator::Cubature { points, weights } => {
                let dim = self.output_dim();
                let mut acc = vec![0.0; dim];
                let mut buf = vec![0.0; dim];
                let mut g = vec![0.0; k];
                for (p, &w) in points.iter().zip(weights) {
                    for j in 0..k {
                        g[j] = mean[j] + p[j];
                    }
                    self.g.eval_into(&g, &mut buf);
                    for (a, b) in acc.iter_mut().zip(&buf) {
                        *a += w * b;
                    }
                }
                acc.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                acc
            }
        }
    }
}

fn tensor_rule(rule: &Arc<NormalRule>, k: usize) -> (Vec<DVector<f64>>, Vec<f64>) {
    let m = rule.nodes.len();
    let total = m.pow(k as u32);
    let mut points = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut z = DVector::zeros(k);
        let mut w = 1.0;
        for j in 0..k {
            let i = rem % m;
            rem /= m;
            z[j] = rule.nodes[i];
            w *= rule.weights[i];
        }
        if w > 0.0 {
            points.push(z);
            weights.push(w);
        }
    }
    (points, weights)
}

fn mc_rule(k: usize, samples: usize, seed: u64) -> (Vec<DVector<f64>>, Vec<f64>) {
    let mut rng = seeded(seed);
    let points = (0..samples).map(|_| DVector::from_fn(k, |_, _| rng.sample(StandardNormal))).collect();
    (points, vec![1.0 / samples as f64; samples])
}

/// One-off evaluation of `E_Z g(M s + L Z)`.
pub fn angular_predict_multi(s: &[f64], params: &ConditionalParams, g: &IndexLink, integrator: &MultiIntegrator) -> Result<Vec<f64>> {
    if s.len() != params.m_star.nrows() {
        return Err(Error::Contract(format!("expected {} normalized logits, got {}", params.m_star.nrows(), s.len())));
    }
    Ok(MultiAngularPredictor::new(params, g, integrator)?.predict(s))
}

/// `y_i ~ Bernoulli(g(W_star^T x_i))` for a scalar `g`.
pub fn generate_multi_labels(x: &DMatrix<f64>, w_star: &DMatrix<f64>, g: &IndexLink, seed: u64) -> Result<Vec<u8>> {
    if !g.is_scalar() {
        return Err(Error::Contract("labels need a scalar index link".into()));
    }
    if x.ncols() != w_star.nrows() {
        return Err(Error::Contract(format!("design has {} columns, index matrix has {} rows", x.ncols(), w_star.nrows())));
    }
    let gm = x * w_star;
    let mut probs = Vec::with_capacity(x.nrows());
    let mut buf = vec![0.0; gm.ncols()];
    for i in 0..gm.nrows() {
        for j in 0..gm.ncols() {
            buf[j] = gm[(i, j)];
        }
        let p = g.eval_scalar(&buf)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::LinkRange(format!("index link returned {p} at row {i}")));
        }
        probs.push(p);
    }
    let mut rng = seeded(seed);
    Ok(bernoulli_labels(probs, &mut rng))
}
