//! Hat-system construction, exact-controllability margins, reachability
//! tests and the Monte Carlo identity behind the transfer-control
//! construction.
//!
//! The hat system attaches the Riccati solution to the dynamics,
//!
//! ```text
//! Ahat = A + Sigma Q,
//! Khat = K (I + Sigma R)^{-1},
//! Lhat = [ L N^{-1/2} | -Sigma Q^{1/2} | K (I + Sigma R)^{-1} Sigma R^{1/2} ],
//! ```
//!
//! and shares the reachable sets of the canonical system while its
//! controllability Gramian over `[t, T]` is exactly `Sigma(t)`. All
//! reachability arithmetic therefore runs deterministically against
//! `Sigma(t)`; Monte Carlo Gramian estimation stays available as a
//! cross-check, never as the decision rule.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::CoeffPath;
use crate::linalg;
use crate::mc::NoiseEnsemble;
use crate::problem::{SolverSettings, ValidatedProblem};
use crate::riccati::{PhiCoeffs, SigmaPath};

/// Hat-system coefficients on the problem grid. `Lhat` is `n x (m + n)`:
/// the three blocks have `m - n`, `n` and `n` columns in that order.
#[derive(Debug, Clone)]
pub struct HatCoefficients {
    pub ahat: CoeffPath,
    pub khat: CoeffPath,
    pub lhat: CoeffPath,
}

/// Outcome of a reachability solve: the minimal-norm candidate `xi`, its
/// least-squares residual, and the controllability margin of the Gramian
/// used.
#[derive(Debug, Clone)]
pub struct ReachabilityResult {
    pub reachable: bool,
    pub xi: DVector<f64>,
    pub residual: f64,
    pub margin: f64,
}

/// Builds the hat-system coefficients from a Riccati solution.
pub fn hat_coefficients(sig: &SigmaPath, p: &ValidatedProblem) -> Result<HatCoefficients> {
    let pr = p.problem();
    let n = p.state_dim();
    let mn = p.drift_control_dim();
    let nodes = p.grid().num_nodes();
    let floor = pr.weights.delta + p.settings().psd_tol;

    let mut ahat = Vec::with_capacity(nodes);
    let mut khat = Vec::with_capacity(nodes);
    let mut lhat = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let sigma = sig.sigma(i);
        ahat.push(pr.a.at(i) + sigma * pr.weights.q.at(i));

        // K (I + Sigma R)^{-1} = ((I + R Sigma)^{-1} K^T)^T.
        let ki = sig.solve_r_sigma_mat(i, &pr.k.at(i).transpose())?.transpose();

        let n_inv_sqrt = linalg::psd_inv_sqrt(pr.weights.n.at(i), floor).map_err(|_| {
            Error::NumericalFailure(format!(
                "N at node {i} has an eigenvalue below delta = {}",
                pr.weights.delta
            ))
        })?;
        let q_sqrt = linalg::psd_sqrt(pr.weights.q.at(i));
        let r_sqrt = linalg::psd_sqrt(pr.weights.r.at(i));

        let mut li = DMatrix::zeros(n, mn + 2 * n);
        li.view_mut((0, 0), (n, mn)).copy_from(&(pr.l.at(i) * n_inv_sqrt));
        li.view_mut((0, mn), (n, n)).copy_from(&(-(sigma * q_sqrt)));
        li.view_mut((0, mn + n), (n, n)).copy_from(&(&ki * sigma * r_sqrt));
        lhat.push(li);
        khat.push(ki);
    }
    Ok(HatCoefficients {
        ahat: CoeffPath::from_nodes(ahat)?,
        khat: CoeffPath::from_nodes(khat)?,
        lhat: CoeffPath::from_nodes(lhat)?,
    })
}

/// Deterministic exact-controllability test over `[t, T]`: the smallest
/// eigenvalue of `Sigma(t)`. Strictly positive means every target is
/// reachable from every initial state on the subinterval.
pub fn exact_controllability_margin(
    sig: &SigmaPath,
    p: &ValidatedProblem,
    t: f64,
) -> Result<f64> {
    let i = p.grid().index_of(t)?;
    Ok(sig.min_eigenvalue_at(i))
}

/// Solves `Sigma(t) xi = x0 + a(t)` in the minimal-norm least-squares sense.
/// `reachable` holds when the residual is within the relative tolerance; an
/// inconsistent system is a result, not an error.
pub fn reachability_solve(
    x0: &DVector<f64>,
    sig: &SigmaPath,
    phi: &PhiCoeffs,
    p: &ValidatedProblem,
    t: f64,
) -> Result<ReachabilityResult> {
    let i = p.grid().index_of(t)?;
    if x0.len() != p.state_dim() {
        return Err(Error::DimensionMismatch("initial state dimension".into()));
    }
    let rhs = x0 + phi.offset(i);
    let (xi, residual) = linalg::pinv_solve_sym(sig.sigma(i), &rhs);
    Ok(finish(xi, residual, &rhs, sig.min_eigenvalue_at(i), p.settings()))
}

/// Solves `F Sigma(t) xi = b + F a(t)` in the minimal-norm least-squares
/// sense: is any point of the manifold steered to the target?
pub fn manifold_reachability_solve(
    f: &DMatrix<f64>,
    b: &DVector<f64>,
    sig: &SigmaPath,
    phi: &PhiCoeffs,
    p: &ValidatedProblem,
    t: f64,
) -> Result<ReachabilityResult> {
    let i = p.grid().index_of(t)?;
    if f.ncols() != p.state_dim() || b.len() != f.nrows() {
        return Err(Error::DimensionMismatch("manifold dimensions".into()));
    }
    let rhs = b + f * phi.offset(i);
    let f_sigma = f * sig.sigma(i);
    let (xi, residual) = linalg::pinv_solve(&f_sigma, &rhs)?;
    Ok(finish(xi, residual, &rhs, sig.min_eigenvalue_at(i), p.settings()))
}

fn finish(
    xi: DVector<f64>,
    residual: f64,
    rhs: &DVector<f64>,
    margin: f64,
    settings: &SolverSettings,
) -> ReachabilityResult {
    let reachable = residual <= settings.lsq_residual_tol * (1.0 + rhs.norm());
    ReachabilityResult { reachable, xi, residual, margin }
}

/// Monte Carlo check of the transfer-control identity: with
/// `v(s) = -Lhat(s)^T X(t0,s)^T xi`, the expected response
/// `-E int X(t0,s) Lhat(s) v(s) ds` must reproduce `Psi(t0,t1) xi` computed
/// from the same paths. Returns `|difference| / (1 + |Psi xi|)`; with shared
/// paths only quadrature and roundoff remain.
pub fn candidate_identity_check(
    xi: &DVector<f64>,
    hat: &HatCoefficients,
    noise: &NoiseEnsemble,
    t0: f64,
    t1: f64,
) -> Result<f64> {
    let grid = noise.grid();
    hat.ahat.check_grid(grid, "Ahat")?;
    let n = hat.ahat.rows();
    if xi.len() != n {
        return Err(Error::DimensionMismatch("candidate dimension".into()));
    }
    let i0 = grid.index_of(t0)?;
    let i1 = grid.index_of(t1)?;
    if i0 >= i1 {
        return Err(Error::BadGrid(format!("need t0 < t1, got {t0} >= {t1}")));
    }
    let h = grid.step();
    let q = hat.lhat.cols();

    struct PathOut {
        response: DVector<f64>,
        gram: DMatrix<f64>,
    }
    let per_path: Vec<PathOut> = (0..noise.num_paths())
        .into_par_iter()
        .map(|p| -> Result<PathOut> {
            let dw = noise.increments(p);
            let mut x = DMatrix::identity(n, n);
            let mut cell = DMatrix::zeros(n, n);
            let mut next = DMatrix::zeros(n, n);
            let step = |x: &mut DMatrix<f64>,
                        next: &mut DMatrix<f64>,
                        cell: &mut DMatrix<f64>,
                        i: usize| {
                let a = hat.ahat.at(i);
                let k = hat.khat.at(i);
                for cj in 0..n {
                    for ci in 0..n {
                        let mut v = -h * a[(ci, cj)] - dw[i] * k[(ci, cj)];
                        if ci == cj {
                            v += 1.0;
                        }
                        cell[(ci, cj)] = v;
                    }
                }
                next.gemm(1.0, x, cell, 0.0);
                std::mem::swap(x, next);
            };
            for i in 0..i0 {
                step(&mut x, &mut next, &mut cell, i);
            }
            let lu0 = if i0 > 0 { Some(x.clone().lu()) } else { None };
            let mut u = DMatrix::zeros(n, q);
            let mut response = DVector::zeros(n);
            let mut gram = DMatrix::zeros(n, n);
            for i in i0..i1 {
                match &lu0 {
                    None => u.gemm(1.0, &x, hat.lhat.at(i), 0.0),
                    Some(lu) => {
                        let rel = lu.solve(&x).ok_or_else(|| {
                            log::warn!("path {p}: hat fundamental matrix singular at node {i0}");
                            Error::Singular(format!("hat fundamental matrix, path {p}"))
                        })?;
                        u.gemm(1.0, &rel, hat.lhat.at(i), 0.0);
                    }
                }
                // v_i = -u^T xi; response -= h * u v_i; gram += h * u u^T.
                let v = -(u.transpose() * xi);
                response.gemv(-h, &u, &v, 1.0);
                gram.gemm(h, &u, &u.transpose(), 1.0);
                step(&mut x, &mut next, &mut cell, i);
            }
            Ok(PathOut { response, gram })
        })
        .collect::<Result<_>>()?;

    let paths = per_path.len() as f64;
    let responses: Vec<DVector<f64>> = per_path.iter().map(|o| o.response.clone()).collect();
    let grams: Vec<DMatrix<f64>> = per_path.iter().map(|o| o.gram.clone()).collect();
    let side1 =
        linalg::pairwise_sum(&responses, &|a: &DVector<f64>, b| a + b).expect("paths") / paths;
    let psi =
        linalg::pairwise_sum(&grams, &|a: &DMatrix<f64>, b| a + b).expect("paths") / paths;
    let side2 = psi * xi;
    Ok((&side1 - &side2).norm() / (1.0 + side2.norm()))
}
