//! Small dense helpers shared by the metric code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative change of the Rayleigh quotient at which power iteration stops.
pub const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 100_000;

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let mut eig = SymmetricEigen::new(m.clone()).eigenvalues.as_slice().to_vec();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power iteration.
pub fn power_iteration(m: &DMatrix<f64>, tol: f64) -> Result<f64> {
    let n = m.nrows();
    if n == 0 || !m.is_square() {
        return Err(Error::Shape("power iteration needs a non-empty square matrix".into()));
    }
    // Deterministic start with no symmetry that could hide the top eigenvector.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 + 1.0).sqrt() / n as f64);
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITER {
        let w = m * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if !norm.is_finite() {
            return Err(Error::Numeric("power iteration overflowed".into()));
        }
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = w / norm;
        if (next - lambda).abs() <= tol * next.abs() {
            return Ok(next);
        }
        lambda = next;
    }
    Err(Error::Numeric(format!(
        "power iteration did not reach tolerance {tol} in {POWER_MAX_ITER} iterations"
    )))
}

/// Squared spectral norm `‖A‖₂²` of a rectangular matrix.
pub fn spectral_norm_sq(a: &DMatrix<f64>) -> Result<f64> {
    let gram = if a.nrows() <= a.ncols() {
        a * a.transpose()
    } else {
        a.transpose() * a
    };
    power_iteration(&gram, POWER_TOL)
}

/// `G Gᵀ` for row vectors `G`.
pub fn gram_of_rows(rows: &[&[f64]]) -> DMatrix<f64> {
    let n = rows.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = crate::net::dot(rows[i], rows[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}
