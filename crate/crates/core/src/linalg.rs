//! Small dense linear-algebra helpers used across the solver modules.
//!
//! Everything here operates on symmetric matrices through eigendecompositions
//! so that pseudo-inversion and square roots are deterministic; general
//! inverses go through LU factorizations, never explicit inversion.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `(X + X^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize_mut(&mut out);
    out
}

pub fn symmetrize_mut(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `max_ij |X_ij - X_ji|`.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Entrywise max-norm.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    debug_assert!(max_asymmetry(m) <= 1e-9 * (1.0 + max_abs(m)));
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &x| acc.min(x))
}

/// Symmetric square root of a positive semidefinite matrix. Eigenvalues below
/// zero (roundoff) are clamped before taking the root.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    rebuild_symmetric(&eig.eigenvectors, &roots)
}

/// Symmetric inverse square root of a positive definite matrix. Fails when an
/// eigenvalue sits at or below `floor`.
pub fn psd_inv_sqrt(m: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    if let Some(l) = eig.eigenvalues.iter().find(|&&l| l <= floor) {
        return Err(Error::NumericalFailure(format!(
            "inverse square root: eigenvalue {l:.6e} at or below floor {floor:.6e}"
        )));
    }
    let roots = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(rebuild_symmetric(&eig.eigenvectors, &roots))
}

fn rebuild_symmetric(vectors: &DMatrix<f64>, scaled: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled_vecs = vectors.clone();
    for (j, mut col) in scaled_vecs.column_iter_mut().enumerate() {
        col *= scaled[j];
    }
    let mut out = &scaled_vecs * vectors.transpose();
    symmetrize_mut(&mut out);
    out
}

/// Minimal-norm least-squares solution of `S x = rhs` for symmetric positive
/// semidefinite `S`, via eigendecomposition with the relative eigenvalue
/// cutoff `1e-12 * lambda_max`. Returns the solution together with the
/// residual `|S x - rhs|_2`.
pub fn pinv_solve_sym(s: &DMatrix<f64>, rhs: &DVector<f64>) -> (DVector<f64>, f64) {
    let eig = symmetrize(s).symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().fold(0.0f64, |acc, &l| acc.max(l.abs()));
    let cutoff = 1e-12 * lam_max;
    let mut x = DVector::zeros(rhs.len());
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cutoff {
            let v = eig.eigenvectors.column(j);
            x.axpy(v.dot(rhs) / l, &v, 1.0);
        }
    }
    let residual = (s * &x - rhs).norm();
    (x, residual)
}

/// Minimal-norm least-squares solution of `A x = rhs` for a general (possibly
/// rectangular, possibly rank-deficient) `A`, via SVD with the singular-value
/// cutoff `1e-12 * sigma_max`.
pub fn pinv_solve(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().fold(0.0f64, |acc, &s| acc.max(s));
    let eps = (1e-12 * sigma_max).max(f64::MIN_POSITIVE);
    let x = svd
        .solve(rhs, eps)
        .map_err(|e| Error::NumericalFailure(format!("svd solve: {e}")))?;
    let residual = (a * &x - rhs).norm();
    Ok((x, residual))
}

/// Ratio of extreme singular values; `inf` when the matrix is singular to
/// machine precision.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().fold(0.0f64, |acc, &s| acc.max(s));
    let min = sv.iter().fold(f64::INFINITY, |acc, &s| acc.min(s));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Deterministic pairwise reduction in index order. Used wherever Monte Carlo
/// accumulators are combined, so results do not depend on the worker count.
pub fn pairwise_sum<T, F>(items: &[T], add: &F) -> Option<T>
where
    T: Clone,
    F: Fn(&T, &T) -> T,
{
    match items.len() {
        0 => None,
        1 => Some(items[0].clone()),
        len => {
            let mid = len / 2;
            let left = pairwise_sum(&items[..mid], add)?;
            let right = pairwise_sum(&items[mid..], add)?;
            Some(add(&left, &right))
        }
    }
}

pub fn pairwise_sum_f64(xs: &[f64]) -> f64 {
    pairwise_sum(xs, &|a, b| a + b).unwrap_or(0.0)
}

/// Mean and standard error (`sd / sqrt(len)`) of a sample, both computed with
/// pairwise summation. A single observation reports a standard error of zero.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum_f64(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum_f64(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
