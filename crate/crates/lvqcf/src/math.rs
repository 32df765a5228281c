//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Force exact symmetry by averaging with the transpose.
pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Largest absolute asymmetry `max |m_ij - m_ji|`.
pub(crate) fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenvalues of a symmetric matrix, ascending.
pub(crate) fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    DVector::from_vec(vals)
}

/// Spectral norm of a symmetric matrix (largest |eigenvalue|).
pub(crate) fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Positive semi-definiteness test with a relative eigenvalue floor:
/// smallest eigenvalue must be >= -tol_rel * max(1, ||m||).
pub(crate) fn is_psd(m: &DMatrix<f64>, tol_rel: f64) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    let vals = sym_eigenvalues(m);
    let scale = vals.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    vals[0] >= -tol_rel * scale
}

/// Inverse square root of a symmetric psd matrix, with eigenvalues floored
/// at `floor` so near-singular directions stay bounded.
pub(crate) fn inv_sqrt_psd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = eig.eigenvalues.map(|v| 1.0 / v.max(floor).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Max-norm of a vector.
pub(crate) fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// `0.5 * x' M x` for symmetric `M`.
pub(crate) fn half_quad(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    0.5 * (m * x).dot(x)
}

pub(crate) fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}
