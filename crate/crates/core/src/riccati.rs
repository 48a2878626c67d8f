//! Backward integration of the Riccati-type equation and of the two matrix
//! ODEs giving the affine backward-equation coefficients.
//!
//! The Riccati solution `Sigma` satisfies, backward from `Sigma(T) = 0`,
//!
//! ```text
//! Sigma' = Sigma A^T + A Sigma + Sigma Q Sigma
//!          - L N^{-1} L^T - K (I + Sigma R)^{-1} Sigma K^T,
//! ```
//!
//! and is symmetric positive semidefinite on the whole interval. For an
//! affine target `eta = c0 + c1 W(T)`, the backward pair `(phi, beta)` with
//! `phi(T) = -eta` is exactly
//!
//! ```text
//! phi(s) = a(s) + bc(s) W(s),      beta(s) = bc(s),
//! ```
//!
//! where `bc' = (A + Sigma Q) bc` and
//! `a' = (A + Sigma Q) a + K (I + Sigma R)^{-1} bc` backward from
//! `a(T) = -c0`, `bc(T) = -c1`: matching drift and diffusion of the ansatz
//! shows it solves the backward equation with deterministic coefficients.
//!
//! The integrator is the classical four-stage one-step method with a fixed
//! step (grid cells, optionally refined by `ode_substeps`), coefficients
//! frozen per cell at the left node, and per-step symmetrization of `Sigma`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mc::DynLu;
use crate::problem::{AffineTarget, ValidatedProblem};

/// Time-gridded Riccati solution with cached factorizations of
/// `I + Sigma(s) R(s)` and `I + R(s) Sigma(s)` per node.
#[derive(Debug)]
pub struct SigmaPath {
    values: Vec<DMatrix<f64>>,
    lu_sigma_r: Vec<DynLu>,
    lu_r_sigma: Vec<DynLu>,
}

impl SigmaPath {
    pub fn sigma(&self, node: usize) -> &DMatrix<f64> {
        &self.values[node]
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    pub fn min_eigenvalue_at(&self, node: usize) -> f64 {
        linalg::min_eigenvalue(&self.values[node])
    }

    /// `(I + Sigma R)^{-1} rhs` at a node, through the cached factorization.
    pub fn solve_sigma_r(&self, node: usize, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu_sigma_r[node]
            .solve(rhs)
            .ok_or_else(|| Error::NumericalFailure(format!("I + Sigma R singular at node {node}")))
    }

    /// `(I + R Sigma)^{-1} rhs` at a node, through the cached factorization.
    pub fn solve_r_sigma(&self, node: usize, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu_r_sigma[node]
            .solve(rhs)
            .ok_or_else(|| Error::NumericalFailure(format!("I + R Sigma singular at node {node}")))
    }

    /// Matrix version of [`SigmaPath::solve_r_sigma`].
    pub fn solve_r_sigma_mat(&self, node: usize, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lu_r_sigma[node]
            .solve(rhs)
            .ok_or_else(|| Error::NumericalFailure(format!("I + R Sigma singular at node {node}")))
    }

    /// In-place variant of [`SigmaPath::solve_sigma_r`]; `false` on a
    /// singular factorization.
    pub fn solve_sigma_r_mut(&self, node: usize, rhs: &mut DVector<f64>) -> bool {
        self.lu_sigma_r[node].solve_mut(rhs)
    }

    /// In-place variant of [`SigmaPath::solve_r_sigma`].
    pub fn solve_r_sigma_mut(&self, node: usize, rhs: &mut DVector<f64>) -> bool {
        self.lu_r_sigma[node].solve_mut(rhs)
    }
}

/// Affine coefficients of the backward pair: `phi(s) = a(s) + bc(s) W(s)`,
/// `beta(s) = bc(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiCoeffs {
    a: Vec<DVector<f64>>,
    bc: Vec<DVector<f64>>,
}

impl PhiCoeffs {
    /// Deterministic part `a(s_i)`.
    pub fn offset(&self, node: usize) -> &DVector<f64> {
        &self.a[node]
    }

    /// Brownian loading `bc(s_i)`, which is also `beta(s_i)`.
    pub fn loading(&self, node: usize) -> &DVector<f64> {
        &self.bc[node]
    }

    /// Realization `phi(s_i) = a(s_i) + bc(s_i) w`.
    pub fn phi(&self, node: usize, w: f64) -> DVector<f64> {
        &self.a[node] + &self.bc[node] * w
    }

    pub fn num_nodes(&self) -> usize {
        self.a.len()
    }
}

/// Frozen per-cell coefficient bundle for the backward integrations.
struct CellCoeffs {
    a: DMatrix<f64>,
    a_t: DMatrix<f64>,
    k: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    /// `L N^{-1} L^T`, the constant forcing term of the Riccati equation.
    l_ninv_lt: DMatrix<f64>,
}

fn cell_coeffs(p: &ValidatedProblem, node: usize) -> Result<CellCoeffs> {
    let pr = p.problem();
    let l = pr.l.at(node);
    let n_mat = pr.weights.n.at(node);
    let chol = n_mat.clone().cholesky().ok_or_else(|| {
        Error::NumericalFailure(format!("N not positive definite at node {node}"))
    })?;
    let ninv_lt = chol.solve(&l.transpose());
    let mut l_ninv_lt = l * ninv_lt;
    linalg::symmetrize_mut(&mut l_ninv_lt);
    let a = pr.a.at(node).clone();
    Ok(CellCoeffs {
        a_t: a.transpose(),
        a,
        k: pr.k.at(node).clone(),
        q: pr.weights.q.at(node).clone(),
        r: pr.weights.r.at(node).clone(),
        l_ninv_lt,
    })
}

/// Riccati right-hand side with frozen coefficients.
fn riccati_rhs(sigma: &DMatrix<f64>, c: &CellCoeffs) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    let mut out = sigma * &c.a_t;
    out += &c.a * sigma;
    out += sigma * &c.q * sigma;
    out -= &c.l_ninv_lt;
    let i_sr = DMatrix::identity(n, n) + sigma * &c.r;
    let inv_sigma = i_sr
        .lu()
        .solve(sigma)
        .ok_or_else(|| Error::NumericalFailure("I + Sigma R singular inside a stage".into()))?;
    out -= &c.k * inv_sigma * c.k.transpose();
    linalg::symmetrize_mut(&mut out);
    Ok(out)
}

/// One classical four-stage step of size `tau` (negative when integrating
/// backward) applied to `sigma`, which is symmetrized afterwards.
fn rk4_sigma_step(sigma: &mut DMatrix<f64>, tau: f64, c: &CellCoeffs) -> Result<()> {
    let k1 = riccati_rhs(sigma, c)?;
    let k2 = riccati_rhs(&(&*sigma + &k1 * (tau / 2.0)), c)?;
    let k3 = riccati_rhs(&(&*sigma + &k2 * (tau / 2.0)), c)?;
    let k4 = riccati_rhs(&(&*sigma + &k3 * tau), c)?;
    *sigma += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (tau / 6.0);
    linalg::symmetrize_mut(sigma);
    Ok(())
}

/// Backward integration of the Riccati equation from `Sigma(T) = 0`.
///
/// Each node value is checked for positive semidefiniteness: eigenvalues in
/// `[psd_tol, 0)` are clipped to zero with a warning, anything below
/// `psd_tol` aborts the solve.
pub fn solve_sigma(p: &ValidatedProblem) -> Result<SigmaPath> {
    let grid = p.grid();
    let n = p.state_dim();
    let steps = grid.steps();
    let sub = p.settings().ode_substeps;
    let tau = -grid.step() / sub as f64;
    let psd_tol = p.settings().psd_tol;

    let mut values = vec![DMatrix::zeros(n, n); steps + 1];
    for i in (0..steps).rev() {
        let c = cell_coeffs(p, i)?;
        let mut sigma = values[i + 1].clone();
        for _ in 0..sub {
            rk4_sigma_step(&mut sigma, tau, &c)?;
        }
        if sigma.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "Riccati integration blew up at node {i}"
            )));
        }
        let eig = sigma.clone().symmetric_eigen();
        let lam_min = eig.eigenvalues.min();
        if lam_min < psd_tol {
            return Err(Error::NumericalFailure(format!(
                "Sigma lost positive semidefiniteness at node {i}: \
                 eigenvalue {lam_min:.3e} below tolerance {psd_tol:.1e}"
            )));
        }
        if lam_min < 0.0 {
            log::warn!(
                "clipping eigenvalue {lam_min:.3e} of Sigma at node {i} to zero"
            );
            let clipped = eig.eigenvalues.map(|l| l.max(0.0));
            let mut rebuilt = &eig.eigenvectors
                * DMatrix::from_diagonal(&clipped)
                * eig.eigenvectors.transpose();
            linalg::symmetrize_mut(&mut rebuilt);
            sigma = rebuilt;
        }
        values[i] = sigma;
    }

    let mut lu_sigma_r = Vec::with_capacity(steps + 1);
    let mut lu_r_sigma = Vec::with_capacity(steps + 1);
    for (i, sigma) in values.iter().enumerate() {
        let r = p.problem().weights.r.at(i);
        let eye = DMatrix::identity(n, n);
        let sr = (&eye + sigma * r).lu();
        let rs = (&eye + r * sigma).lu();
        if !sr.is_invertible() || !rs.is_invertible() {
            return Err(Error::NumericalFailure(format!(
                "I + Sigma R singular at node {i}"
            )));
        }
        lu_sigma_r.push(sr);
        lu_r_sigma.push(rs);
    }
    Ok(SigmaPath { values, lu_sigma_r, lu_r_sigma })
}

/// A-posteriori residual: the largest entrywise defect of the central
/// difference `(Sigma_{i+1} - Sigma_{i-1}) / 2h` against the right-hand side
/// at interior nodes. Independent of the integration path, second order in
/// the step.
pub fn riccati_residual(sig: &SigmaPath, p: &ValidatedProblem) -> Result<f64> {
    let grid = p.grid();
    let two_h = 2.0 * grid.step();
    let mut worst = 0.0f64;
    for i in 1..grid.steps() {
        let c = cell_coeffs(p, i)?;
        let rhs = riccati_rhs(sig.sigma(i), &c)?;
        let diff = (sig.sigma(i + 1) - sig.sigma(i - 1)) / two_h;
        worst = worst.max(linalg::max_abs(&(diff - rhs)));
    }
    Ok(worst)
}

/// Backward integration of the target ODEs from `a(T) = -c0`,
/// `bc(T) = -c1`.
///
/// The stage values of `Sigma` are re-derived per cell from the stored node
/// value with the same stepping rule as [`solve_sigma`], so both
/// integrations see identical coefficients.
pub fn solve_target_odes(
    sig: &SigmaPath,
    target: &AffineTarget,
    p: &ValidatedProblem,
) -> Result<PhiCoeffs> {
    let grid = p.grid();
    let n = p.state_dim();
    if target.c0.len() != n || target.c1.len() != n {
        return Err(Error::DimensionMismatch("target dimension".into()));
    }
    let steps = grid.steps();
    let sub = p.settings().ode_substeps;
    let tau = -grid.step() / sub as f64;

    let mut a = vec![DVector::zeros(n); steps + 1];
    let mut bc = vec![DVector::zeros(n); steps + 1];
    a[steps] = -&target.c0;
    bc[steps] = -&target.c1;

    // State of the coupled backward system per cell.
    struct State {
        sigma: DMatrix<f64>,
        a: DVector<f64>,
        bc: DVector<f64>,
    }
    let deriv = |s: &State, c: &CellCoeffs| -> Result<State> {
        let n = s.sigma.nrows();
        let apq = &c.a + &s.sigma * &c.q;
        let i_sr = DMatrix::identity(n, n) + &s.sigma * &c.r;
        let inv_bc = i_sr.lu().solve(&s.bc).ok_or_else(|| {
            Error::NumericalFailure("I + Sigma R singular inside a stage".into())
        })?;
        Ok(State {
            sigma: riccati_rhs(&s.sigma, c)?,
            a: &apq * &s.a + &c.k * inv_bc,
            bc: apq * &s.bc,
        })
    };
    let advanced = |s: &State, d: &State, w: f64| State {
        sigma: &s.sigma + &d.sigma * w,
        a: &s.a + &d.a * w,
        bc: &s.bc + &d.bc * w,
    };

    for i in (0..steps).rev() {
        let c = cell_coeffs(p, i)?;
        let mut state = State {
            sigma: sig.sigma(i + 1).clone(),
            a: a[i + 1].clone(),
            bc: bc[i + 1].clone(),
        };
        for _ in 0..sub {
            let k1 = deriv(&state, &c)?;
            let k2 = deriv(&advanced(&state, &k1, tau / 2.0), &c)?;
            let k3 = deriv(&advanced(&state, &k2, tau / 2.0), &c)?;
            let k4 = deriv(&advanced(&state, &k3, tau), &c)?;
            state.sigma += (&k1.sigma + &k2.sigma * 2.0 + &k3.sigma * 2.0 + &k4.sigma)
                * (tau / 6.0);
            linalg::symmetrize_mut(&mut state.sigma);
            state.a += (&k1.a + &k2.a * 2.0 + &k3.a * 2.0 + &k4.a) * (tau / 6.0);
            state.bc += (&k1.bc + &k2.bc * 2.0 + &k3.bc * 2.0 + &k4.bc) * (tau / 6.0);
        }
        if !state.a.iter().all(|x| x.is_finite()) || !state.bc.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "target ODE integration blew up at node {i}"
            )));
        }
        a[i] = state.a;
        bc[i] = state.bc;
    }
    Ok(PhiCoeffs { a, bc })
}
