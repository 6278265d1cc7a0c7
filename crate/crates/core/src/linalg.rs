//! Spectral helpers on small dense symmetric matrices.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Absolute tolerance used for symmetry and PSD checks.
pub const PSD_TOL: f64 = 1e-9;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::invalid(format!("expected square matrix, got {}x{}", m.nrows(), m.ncols())));
    }
    let asym = max_asymmetry(m);
    // relative slack for large-magnitude entries
    let scale = m.amax().max(1.0);
    if asym > PSD_TOL * scale {
        return Err(Error::invalid(format!("matrix not symmetric (max asymmetry {asym:.3e})")));
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_symmetric(m)?;
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let mut vals: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    Ok(vals)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    eigenvalues(m)?.first().copied().ok_or_else(|| Error::invalid("empty matrix has no eigenvalues"))
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    eigenvalues(m)?.last().copied().ok_or_else(|| Error::invalid("empty matrix has no eigenvalues"))
}

/// Loewner order test `a ⪯ b`, i.e. `λ_min(b - a) ≥ -tol`.
pub fn psd_order_leq(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> Result<bool> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(min_eigenvalue(&(b - a))? >= -tol)
}

/// Symmetric square-root factor `F` with `F Fᵀ = m` for a PSD matrix; negative
/// eigenvalues within tolerance are clipped to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

/// Relative Frobenius distance `‖a - b‖ / max(‖a‖, floor)`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / a.norm().max(floor)
}
