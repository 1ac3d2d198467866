//! Expectations over a standard normal: Gauss-Hermite rules and seeded Monte Carlo.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{LinkFunction, LinkKind};
use crate::rng::seeded;

pub const DEFAULT_GH_NODES: usize = 128;
pub const FINE_GH_NODES: usize = 512;
pub const MIN_MC_SAMPLES: usize = 1000;

/// How `E_Z f(Z)` with `Z ~ N(0, 1)` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum IntegratorCfg {
    GaussHermite { nodes: usize },
    MonteCarlo { samples: usize, seed: u64 },
    /// Probit and clipped-linear links only.
    ClosedForm,
}

impl Default for IntegratorCfg {
    fn default() -> Self {
        IntegratorCfg::GaussHermite { nodes: DEFAULT_GH_NODES }
    }
}

impl IntegratorCfg {
    /// Gauss-Hermite for smooth links; the exact expression for the clipped-linear link,
    /// whose kinks make quadrature converge slowly.
    pub fn default_for(link: &LinkFunction) -> Self {
        match link.kind {
            LinkKind::ClippedRelu => IntegratorCfg::ClosedForm,
            _ => IntegratorCfg::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            IntegratorCfg::GaussHermite { nodes } if nodes < 2 => {
                Err(Error::Config(format!("Gauss-Hermite needs at least 2 nodes, got {nodes}")))
            }
            IntegratorCfg::MonteCarlo { samples, .. } if samples < MIN_MC_SAMPLES => {
                Err(Error::Config(format!("Monte Carlo needs at least {MIN_MC_SAMPLES} samples, got {samples}")))
            }
            _ => Ok(()),
        }
    }
}

/// Nodes `z_i` and weights `w_i` with `E f(Z) ~ sum_i w_i f(z_i)`, `Z ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&z, &w)| w * f(z)).sum()
    }

    /// Equal-weight rule from `samples` seeded standard normal draws.
    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let nodes: Vec<f64> = (0..samples).map(|_| rng.sample(StandardNormal)).collect();
        let w = 1.0 / samples as f64;
        Self { nodes, weights: vec![w; samples] }
    }

    /// Rule for the given integrator; `None` for the closed form.
    pub fn for_integrator(cfg: &IntegratorCfg) -> Result<Option<Arc<NormalRule>>> {
        cfg.validate()?;
        Ok(match *cfg {
            IntegratorCfg::GaussHermite { nodes } => Some(gauss_hermite(nodes)),
            IntegratorCfg::MonteCarlo { samples, seed } => Some(Arc::new(NormalRule::monte_carlo(samples, seed))),
            IntegratorCfg::ClosedForm => None,
        })
    }
}

/// Physicists' Gauss-Hermite rule (weight `exp(-x^2)`) rescaled to the standard normal.
/// Rules are cached per node count.
pub fn gauss_hermite(n: usize) -> Arc<NormalRule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<NormalRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry(n)
        .or_insert_with(|| {
            let (x, w) = hermite_nodes(n);
            let root_pi = PI.sqrt();
            Arc::new(NormalRule {
                nodes: x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
                weights: w.iter().map(|v| v / root_pi).collect(),
            })
        })
        .clone()
}

/// Roots and weights of the degree-`n` Hermite polynomial (weight `exp(-x^2)`), ascending.
///
/// Starting points are the eigenvalues of the Jacobi matrix; each root is then polished by
/// Newton iteration on the orthonormal three-term recurrence, which also yields the weight.
pub fn hermite_nodes(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64 / 2.0).sqrt() } else { 0.0 });
    let mut guesses: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    guesses.sort_by(f64::total_cmp);

    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    // Roots are symmetric; polish the non-negative half and mirror.
    for i in (n / 2)..n {
        let mut z = guesses[i];
        let mut pp = 0.0;
        for _ in 0..50 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        if n % 2 == 1 && i == n / 2 {
            z = 0.0;
        }
        x[i] = z;
        w[i] = 2.0 / (pp * pp);
        x[n - 1 - i] = -z;
        w[n - 1 - i] = w[i];
    }
    (x, w)
}
