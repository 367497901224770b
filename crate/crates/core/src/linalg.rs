//! Small dense helpers shared by the filter, smoother and simulator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Tolerance used when validating user-supplied covariance matrices.
pub const MODEL_PSD_TOL: f64 = 1e-10;

/// Tolerance used for running filter covariances.
pub const FILTER_PSD_TOL: f64 = 1e-9;

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// In-place `(A + Aᵀ) / 2`.
pub fn symmetrize_mut(a: &mut DMatrix<f64>) {
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Largest absolute entry of `A - Aᵀ`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_psd(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square() && asymmetry(a) <= tol && min_eigenvalue(a) >= -tol
}

/// Square root `S` with `S Sᵀ = A` from the symmetric eigendecomposition.
/// Eigenvalues below zero (rounding noise on a PSD input) are clamped at 0.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// `xᵀ A x`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (a * x).dot(x)
}

/// Solve `A z = b` for a symmetric positive definite `A`, falling back to LU
/// and then to the pseudo-inverse when `A` is singular.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = a.clone().cholesky() {
        return chol.solve(b);
    }
    if let Some(z) = a.clone().lu().solve(b) {
        if z.iter().all(|v| v.is_finite()) {
            return z;
        }
    }
    pseudo_inverse(a) * b
}

pub fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone()
        .pseudo_inverse(1e-12 * a.amax().max(1.0))
        .expect("pseudo-inverse with non-negative epsilon")
}

/// `Kᵗ` by repeated squaring.
pub fn mat_pow(k: &DMatrix<f64>, mut t: usize) -> DMatrix<f64> {
    let mut result = DMatrix::identity(k.nrows(), k.ncols());
    let mut base = k.clone();
    while t > 0 {
        if t & 1 == 1 {
            result = &result * &base;
        }
        base = &base * &base;
        t >>= 1;
    }
    result
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}
