use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::covariance::CovarianceFactors;
use crate::error::{Error, Result};
use crate::link::LinkFunction;
use crate::linalg::psd_cholesky;
use crate::rng::{seeded, StreamRng};

/// Distribution of the iid entries `z_ij` before the covariance is applied.
/// Every kind has mean zero and unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryDistribution {
    Gaussian,
    /// `+1` or `-1` with equal probability.
    Rademacher,
    /// Uniform on `[-sqrt(3), sqrt(3)]`.
    Uniform,
}

impl EntryDistribution {
    pub fn draw(self, rng: &mut StreamRng) -> f64 {
        match self {
            EntryDistribution::Gaussian => rng.sample(StandardNormal),
            EntryDistribution::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            EntryDistribution::Uniform => (2.0 * rng.random::<f64>() - 1.0) * 3f64.sqrt(),
        }
    }
}

impl fmt::Display for EntryDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntryDistribution::Gaussian => "gaussian",
            EntryDistribution::Rademacher => "rademacher",
            EntryDistribution::Uniform => "uniform",
        })
    }
}

impl FromStr for EntryDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gaussian" => Ok(Self::Gaussian),
            "rademacher" => Ok(Self::Rademacher),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!("unknown entry distribution '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Provenance {
    Synthetic { link: LinkFunction, w_star: DVector<f64>, seed: u64 },
    External { path: String },
}

/// Design matrix with binary labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<u8>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<u8>, provenance: Provenance) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Contract(format!("{} rows but {} labels", x.nrows(), y.len())));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::Contract("labels must be 0 or 1".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("design matrix has non-finite entries".into()));
        }
        Ok(Self { x, y, provenance })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Split off the last `k` rows: `(head, tail)`.
    pub fn split_tail(&self, k: usize) -> Result<(Dataset, Dataset)> {
        let n = self.n();
        if k == 0 || k >= n {
            return Err(Error::Contract(format!("cannot carve {k} of {n} rows")));
        }
        let head = Dataset {
            x: self.x.rows(0, n - k).into_owned(),
            y: self.y[..n - k].to_vec(),
            provenance: self.provenance.clone(),
        };
        let tail = Dataset {
            x: self.x.rows(n - k, k).into_owned(),
            y: self.y[n - k..].to_vec(),
            provenance: self.provenance.clone(),
        };
        Ok((head, tail))
    }
}

/// `n` rows `x_i = Sigma^{1/2} z_i` with iid entries of `z_i` drawn from `dist`.
pub fn sample_design(n: usize, cov: &CovarianceFactors, dist: EntryDistribution, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::Contract("design needs at least one row".into()));
    }
    let d = cov.dim();
    let mut rng = seeded(seed);
    let mut z = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        z.push(dist.draw(&mut rng));
    }
    let z = DMatrix::from_row_slice(n, d, &z);
    // Sigma^{1/2} is symmetric, so the rows of Z Sigma^{1/2} are Sigma^{1/2} z_i.
    Ok(z * &cov.sqrt)
}

/// Draw `w ~ N(0, I_d)` and rescale it to unit `Sigma`-norm.
pub fn sample_true_weight(cov: &CovarianceFactors, seed: u64) -> DVector<f64> {
    let d = cov.dim();
    let mut rng = seeded(seed);
    let w = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let norm = w.dot(&(&cov.sigma * &w)).sqrt();
    w / norm
}

/// `y_i ~ Bernoulli(link(w^T x_i))`, independently.
pub fn generate_labels(x: &DMatrix<f64>, w_star: &DVector<f64>, link: &LinkFunction, seed: u64) -> Result<Vec<u8>> {
    if x.ncols() != w_star.len() {
        return Err(Error::Contract(format!("design has {} columns, weight has {}", x.ncols(), w_star.len())));
    }
    let index = x * w_star;
    let mut rng = seeded(seed);
    Ok(bernoulli_labels(index.iter().map(|&u| link.eval(u)), &mut rng))
}

/// One Bernoulli draw per probability, in order.
pub fn bernoulli_labels(probs: impl IntoIterator<Item = f64>, rng: &mut StreamRng) -> Vec<u8> {
    probs.into_iter().map(|p| u8::from(rng.random::<f64>() < p)).collect()
}

/// Sample `n` fresh observations and return only their projections `V^T x_i` (an `n x k` matrix).
///
/// For Gaussian entries the projections are jointly Gaussian with covariance
/// `V^T Sigma V` and are drawn directly in `k` dimensions; other entry
/// distributions go through the full `d`-dimensional draw.
pub fn sample_projections(
    n: usize,
    cov: &CovarianceFactors,
    dist: EntryDistribution,
    directions: &[&DVector<f64>],
    seed: u64,
) -> Result<DMatrix<f64>> {
    let k = directions.len();
    let d = cov.dim();
    if let Some(bad) = directions.iter().find(|v| v.len() != d) {
        return Err(Error::Contract(format!("direction has length {}, expected {d}", bad.len())));
    }
    let v = DMatrix::from_columns(&directions.iter().map(|c| (*c).clone()).collect::<Vec<_>>());
    let mut rng = seeded(seed);
    let mut out = DMatrix::<f64>::zeros(n, k);
    match dist {
        EntryDistribution::Gaussian => {
            let gram = v.transpose() * &cov.sigma * &v;
            let l = psd_cholesky(&gram, 1e-14);
            let mut z = DVector::<f64>::zeros(k);
            for i in 0..n {
                for zj in z.iter_mut() {
                    *zj = rng.sample(StandardNormal);
                }
                let row = &l * &z;
                for j in 0..k {
                    out[(i, j)] = row[j];
                }
            }
        }
        _ => {
            // x^T v = z^T Sigma^{1/2} v
            let rotated = &cov.sqrt * &v;
            let mut z = DVector::<f64>::zeros(d);
            for i in 0..n {
                for zj in z.iter_mut() {
                    *zj = dist.draw(&mut rng);
                }
                let row = rotated.tr_mul(&z);
                for j in 0..k {
                    out[(i, j)] = row[j];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::covariance::{make_covariance, CovarianceSpec};
    use approx::assert_abs_diff_eq;

    fn factors(spec: &CovarianceSpec) -> CovarianceFactors {
        CovarianceFactors::new(make_covariance(spec).unwrap()).unwrap()
    }

    #[test]
    fn gaussian_sample_covariance_matches_identity() {
        let cov = factors(&CovarianceSpec::identity(2, 1.0));
        let n = 100_000;
        let x = sample_design(n, &cov, EntryDistribution::Gaussian, 11).unwrap();
        let s = x.tr_mul(&x) / n as f64;
        for i in 0..2 {
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((s[(i, j)] - target).abs() < 0.02, "{i} {j} {}", s[(i, j)]);
            }
        }
    }

    #[test]
    fn rademacher_rows_whiten_to_signs() {
        let cov = factors(&CovarianceSpec::ar1(0.5, 6));
        let x = sample_design(20, &cov, EntryDistribution::Rademacher, 3).unwrap();
        let z = &x * &cov.inv_sqrt;
        for v in z.iter() {
            assert!((v.abs() - 1.0).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn design_is_deterministic() {
        let cov = factors(&CovarianceSpec::ar1(0.5, 5));
        for dist in [EntryDistribution::Gaussian, EntryDistribution::Uniform] {
            let a = sample_design(7, &cov, dist, 99).unwrap();
            let b = sample_design(7, &cov, dist, 99).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, sample_design(7, &cov, dist, 100).unwrap());
        }
        assert!(sample_design(0, &cov, EntryDistribution::Gaussian, 1).is_err());
    }

    #[test]
    fn entry_moments() {
        let n = 1_000_000;
        for dist in [EntryDistribution::Gaussian, EntryDistribution::Rademacher, EntryDistribution::Uniform] {
            let mut rng = seeded(5);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let v = dist.draw(&mut rng);
                s1 += v;
                s2 += v * v;
            }
            let mean = s1 / n as f64;
            let var = s2 / n as f64 - mean * mean;
            let tol = 1.0 / (n as f64).sqrt();
            assert!(mean.abs() < 4.0 * tol, "{dist} mean {mean}");
            assert!((var - 1.0).abs() < 8.0 * tol, "{dist} var {var}");
        }
    }

    #[test]
    fn true_weight_has_unit_sigma_norm() {
        let cov = factors(&CovarianceSpec::ar1(0.5, 30));
        for seed in 0..5 {
            let w = sample_true_weight(&cov, seed);
            assert_abs_diff_eq!(w.dot(&(&cov.sigma * &w)), 1.0, epsilon = 1e-12);
        }
        assert_ne!(sample_true_weight(&cov, 1), sample_true_weight(&cov, 2));

        let one = factors(&CovarianceSpec::identity(1, 1.0));
        for seed in 0..8 {
            let w = sample_true_weight(&one, seed);
            assert!((w[0].abs() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_links_give_constant_labels() {
        let cov = factors(&CovarianceSpec::identity(3, 1.0));
        let x = sample_design(50, &cov, EntryDistribution::Gaussian, 1).unwrap();
        let w = sample_true_weight(&cov, 2);
        let ones = generate_labels(&x, &w, &LinkFunction::clipped_relu_affine(0.0, 1.0), 3).unwrap();
        assert!(ones.iter().all(|&y| y == 1));
        let zeros = generate_labels(&x, &w, &LinkFunction::clipped_relu_affine(0.0, 0.0), 3).unwrap();
        assert!(zeros.iter().all(|&y| y == 0));
        assert!(generate_labels(&x, &DVector::zeros(2), &LinkFunction::standard_sigmoid(), 0).is_err());
    }

    #[test]
    fn projections_match_full_design_in_distribution() {
        let cov = factors(&CovarianceSpec::ar1(0.5, 8));
        let a = sample_true_weight(&cov, 1);
        let b = sample_true_weight(&cov, 2);
        let gram = [
            a.dot(&(&cov.sigma * &a)),
            a.dot(&(&cov.sigma * &b)),
            b.dot(&(&cov.sigma * &b)),
        ];
        let n = 200_000;
        for dist in [EntryDistribution::Gaussian, EntryDistribution::Uniform] {
            let p = sample_projections(n, &cov, dist, &[&a, &b], 4).unwrap();
            let c = p.tr_mul(&p) / n as f64;
            assert!((c[(0, 0)] - gram[0]).abs() < 0.02);
            assert!((c[(0, 1)] - gram[1]).abs() < 0.02);
            assert!((c[(1, 1)] - gram[2]).abs() < 0.02);
        }
    }
}
