//! Small dense helpers shared by several modules.

use nalgebra::DMatrix;

/// Lower-triangular `L` with `L L^T = m` for a symmetric positive semi-definite `m`.
///
/// Pivots at or below `tol * max_diag` are treated as zero and their column is
/// left empty, so a zero matrix factors to zero instead of failing.
pub fn psd_cholesky(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let cutoff = tol * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag <= cutoff {
            continue;
        }
        let pivot = diag.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / pivot;
        }
    }
    l
}

/// `v^T A v` for symmetric `A`.
pub fn quad_form(a: &DMatrix<f64>, v: &nalgebra::DVector<f64>) -> f64 {
    v.dot(&(a * v))
}
