use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance used for symmetry checks of user supplied matrices.
const SYMMETRY_TOL: f64 = 1e-8;

/// Eigenvalues below this fraction of the largest one are treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceKind {
    /// `rho^{|k-l|}`.
    Ar1 { rho: f64 },
    Identity,
    External(DMatrix<f64>),
}

/// A covariance `scale * base` where `base` is described by [`CovarianceKind`].
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    pub kind: CovarianceKind,
    pub scale: f64,
    pub dim: usize,
}

impl CovarianceSpec {
    /// AR(1) covariance with the customary `1/d` scaling.
    pub fn ar1(rho: f64, dim: usize) -> Self {
        Self { kind: CovarianceKind::Ar1 { rho }, scale: 1.0 / dim as f64, dim }
    }

    pub fn identity(dim: usize, scale: f64) -> Self {
        Self { kind: CovarianceKind::Identity, scale, dim }
    }

    pub fn external(matrix: DMatrix<f64>) -> Self {
        let dim = matrix.nrows();
        Self { kind: CovarianceKind::External(matrix), scale: 1.0, dim }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Covariance("dimension must be positive".into()));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Covariance(format!("scale must be positive, got {}", self.scale)));
        }
        match &self.kind {
            CovarianceKind::Ar1 { rho } if !(rho.abs() < 1.0) => {
                Err(Error::Covariance(format!("AR(1) coefficient must lie in (-1, 1), got {rho}")))
            }
            CovarianceKind::External(m) if m.nrows() != self.dim || m.ncols() != self.dim => Err(Error::Covariance(
                format!("external matrix is {}x{}, expected {}x{}", m.nrows(), m.ncols(), self.dim, self.dim),
            )),
            _ => Ok(()),
        }
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Covariance(format!("matrix is {}x{}, not square", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Covariance("matrix has non-finite entries".into()));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Covariance(format!("asymmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Realize the covariance matrix described by `spec`.
pub fn make_covariance(spec: &CovarianceSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let d = spec.dim;
    let m = match &spec.kind {
        CovarianceKind::Ar1 { rho } => {
            let powers: Vec<f64> = (0..d).map(|k| rho.powi(k as i32)).collect();
            DMatrix::from_fn(d, d, |k, l| spec.scale * powers[k.abs_diff(l)])
        }
        CovarianceKind::Identity => DMatrix::identity(d, d) * spec.scale,
        CovarianceKind::External(base) => {
            check_symmetric(base)?;
            let sym = (base + base.transpose()) * (0.5 * spec.scale);
            if sym.clone().cholesky().is_none() {
                return Err(Error::Covariance("external matrix is not positive definite".into()));
            }
            sym
        }
    };
    Ok(m)
}

/// Symmetric square root and inverse square root of a symmetric positive definite matrix.
///
/// Uses the symmetric eigendecomposition with eigenvalues floored at
/// `EIGEN_FLOOR * lambda_max`; a smallest eigenvalue below that floor is an error.
pub fn matrix_sqrt_and_invsqrt(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_symmetric(m).map_err(|e| Error::SingularCovariance(e.to_string()))?;
    let n = m.nrows();
    if n == 0 {
        return Err(Error::SingularCovariance("empty matrix".into()));
    }
    let eig = ((m + m.transpose()) * 0.5).symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if !(lmax > 0.0) || lmin <= EIGEN_FLOOR * lmax {
        return Err(Error::SingularCovariance(format!("eigenvalue range [{lmin:e}, {lmax:e}]")));
    }
    let floor = EIGEN_FLOOR * lmax;
    let vecs = &eig.eigenvectors;
    let roots: DVector<f64> = eig.eigenvalues.map(|l| l.max(floor).sqrt());

    let mut scaled = vecs.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= roots[j];
    }
    let sqrt = &scaled * vecs.transpose();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col /= roots[j] * roots[j];
    }
    let inv_sqrt = &scaled * vecs.transpose();
    Ok((symmetrize(sqrt), symmetrize(inv_sqrt)))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Ridge-shrunk second-moment estimate from an unlabeled pool (rows are observations).
///
/// Returns `P^T P / m + ridge * tr(P^T P) / (m d) * I`; the mean is not subtracted.
pub fn estimate_covariance(pool: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let (m, d) = pool.shape();
    if m < 2 {
        return Err(Error::Contract(format!("covariance pool needs at least 2 rows, got {m}")));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Contract(format!("ridge must be non-negative, got {ridge}")));
    }
    let mut gram = pool.tr_mul(pool) / m as f64;
    let shrink = ridge * gram.trace() / d as f64;
    for i in 0..d {
        gram[(i, i)] += shrink;
    }
    Ok(symmetrize(gram))
}

/// Covariance together with its symmetric square root and inverse square root.
#[derive(Debug, Clone)]
pub struct CovarianceFactors {
    pub sigma: DMatrix<f64>,
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
}

impl CovarianceFactors {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        let (sqrt, inv_sqrt) = matrix_sqrt_and_invsqrt(&sigma)?;
        Ok(Self { sigma, sqrt, inv_sqrt })
    }

    pub fn from_spec(spec: &CovarianceSpec) -> Result<Self> {
        Self::new(make_covariance(spec)?)
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }
}
