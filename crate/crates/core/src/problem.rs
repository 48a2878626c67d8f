//! Problem data: weights, manifold, target, solver settings, and the
//! validation gate every solver entry point goes through.
//!
//! The model is the canonical-form control problem
//!
//! ```text
//! dx = [A x + K z + L v] ds + z dW,      x(T) = c0 + c1 W(T),
//! J   = E{ <G x(t), x(t)> + int_t^T <Q x, x> + <R z, z> + <N v, v> ds },
//! ```
//!
//! minimised over controls whose state starts on the manifold `F x(t) = b`.
//! The target is restricted to the affine-in-`W(T)` class, which is the
//! largest class for which the backward equation for the offset process
//! reduces to two matrix ODEs and every downstream check stays pathwise
//! exact. The manifold offset `b` and the multiplier are deterministic: the
//! solve is anchored at the start of the interval with trivial filtration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{CoeffPath, TimeGrid};
use crate::linalg;

/// Cost weights. `G` on the initial state, `Q` on the state, `R` on the
/// diffusion control `z`, `N` on the drift control `v`, with `N >= delta I`
/// uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub g: DMatrix<f64>,
    pub q: CoeffPath,
    pub r: CoeffPath,
    pub n: CoeffPath,
    pub delta: f64,
}

/// Initial-state constraint `F x(t) = b` with `F` of size `k x n`, `k <= n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifold {
    pub f: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Terminal target `x(T) = c0 + c1 W(T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTarget {
    pub c0: DVector<f64>,
    pub c1: DVector<f64>,
}

/// A canonical-form problem instance. Dimensions: state `n`, total control
/// `m > n` (so the drift control has `m - n` components), manifold rows `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalProblem {
    pub grid: TimeGrid,
    pub a: CoeffPath,
    pub k: CoeffPath,
    pub l: CoeffPath,
    pub weights: Weights,
    pub manifold: Manifold,
    pub target: AffineTarget,
}

impl CanonicalProblem {
    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn drift_control_dim(&self) -> usize {
        self.l.cols()
    }

    pub fn control_dim(&self) -> usize {
        self.state_dim() + self.drift_control_dim()
    }

    pub fn manifold_rows(&self) -> usize {
        self.manifold.f.nrows()
    }
}

/// Tunable knobs with documented defaults. All tolerances are pinned here so
/// every consumer agrees on them.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    /// Monte Carlo sample paths.
    pub mc_paths: usize,
    /// Seed for the per-path noise streams.
    pub seed: u64,
    /// Substeps per grid cell for the backward matrix integrations.
    pub ode_substeps: usize,
    /// Largest tolerated `|X - X^T|_max` before a weight matrix is rejected;
    /// anything below is silently symmetrized.
    pub symmetry_tol: f64,
    /// Smallest tolerated eigenvalue of a nominally PSD matrix (negative:
    /// roundoff margin).
    pub psd_tol: f64,
    /// Relative residual below which a least-squares system counts as
    /// consistent.
    pub lsq_residual_tol: f64,
    /// Width, in standard errors, of the Monte Carlo acceptance bands.
    pub mc_sigma_mult: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            mc_paths: 10_000,
            seed: 0,
            ode_substeps: 1,
            symmetry_tol: 1e-12,
            psd_tol: -1e-10,
            lsq_residual_tol: 1e-8,
            mc_sigma_mult: 4.0,
        }
    }
}

impl SolverSettings {
    fn check(&self) -> Result<()> {
        if self.mc_paths == 0 {
            return Err(Error::DimensionMismatch("mc_paths must be positive".into()));
        }
        if self.ode_substeps == 0 {
            return Err(Error::DimensionMismatch("ode_substeps must be positive".into()));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.symmetry_tol)
            || !positive(self.lsq_residual_tol)
            || !positive(self.mc_sigma_mult)
        {
            return Err(Error::DimensionMismatch(
                "tolerances must be positive".into(),
            ));
        }
        if !(self.psd_tol.is_finite() && self.psd_tol <= 0.0) {
            return Err(Error::DimensionMismatch(
                "psd_tol is a lower eigenvalue margin and must be <= 0".into(),
            ));
        }
        Ok(())
    }
}

/// A problem that has passed `validate_problem`, with its settings attached.
/// Immutable afterwards and safe to share across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedProblem {
    problem: CanonicalProblem,
    settings: SolverSettings,
}

impl ValidatedProblem {
    pub fn problem(&self) -> &CanonicalProblem {
        &self.problem
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.problem.grid
    }

    pub fn state_dim(&self) -> usize {
        self.problem.state_dim()
    }

    pub fn drift_control_dim(&self) -> usize {
        self.problem.drift_control_dim()
    }
}

/// Validation gate: checks every dimension, grid and positivity invariant,
/// symmetrizing weight matrices whose asymmetry is at most
/// `settings.symmetry_tol` and rejecting anything worse.
///
/// Validation is idempotent: a validated problem passes through unchanged.
pub fn validate_problem(p: &CanonicalProblem, s: &SolverSettings) -> Result<ValidatedProblem> {
    s.check()?;
    let grid = p.grid;
    // TimeGrid construction already enforces t < T and steps >= 2; re-check
    // here so hand-built structs cannot sneak past the gate.
    TimeGrid::new(grid.t_start(), grid.t_end(), grid.steps())?;

    let n = p.a.rows();
    let mn = p.l.cols();
    let k = p.manifold.f.nrows();

    for (path, name, rows, cols) in [
        (&p.a, "A", n, n),
        (&p.k, "K", n, n),
        (&p.l, "L", n, mn),
        (&p.weights.q, "Q", n, n),
        (&p.weights.r, "R", n, n),
        (&p.weights.n, "N", mn, mn),
    ] {
        path.check_grid(&grid, name)?;
        if path.rows() != rows || path.cols() != cols {
            return Err(Error::DimensionMismatch(format!(
                "{name} is {}x{}, expected {rows}x{cols}",
                path.rows(),
                path.cols()
            )));
        }
    }
    if p.weights.g.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "G is {}x{}, expected {n}x{n}",
            p.weights.g.nrows(),
            p.weights.g.ncols()
        )));
    }
    if k > n {
        return Err(Error::DimensionMismatch(format!(
            "manifold has {k} rows but the state dimension is {n}"
        )));
    }
    if p.manifold.f.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "F has {} columns, expected {n}",
            p.manifold.f.ncols()
        )));
    }
    if p.manifold.b.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "b has length {}, expected {k}",
            p.manifold.b.len()
        )));
    }
    if p.target.c0.len() != n || p.target.c1.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "target vectors must have length {n}"
        )));
    }
    for (v, name) in [(&p.manifold.b, "b"), (&p.target.c0, "c0"), (&p.target.c1, "c1")] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name.into()));
        }
    }
    if !(p.weights.delta.is_finite() && p.weights.delta > 0.0) {
        return Err(Error::NotPositive(format!(
            "delta = {} must be strictly positive",
            p.weights.delta
        )));
    }

    let mut out = p.clone();
    out.weights.g = accept_symmetric(&p.weights.g, "G", s.symmetry_tol)?;
    out.weights.q = symmetrize_path(&p.weights.q, "Q", s.symmetry_tol)?;
    out.weights.r = symmetrize_path(&p.weights.r, "R", s.symmetry_tol)?;
    out.weights.n = symmetrize_path(&p.weights.n, "N", s.symmetry_tol)?;

    check_psd(&out.weights.g, "G", s.psd_tol)?;
    for (i, (q, r)) in out.weights.q.iter().zip(out.weights.r.iter()).enumerate() {
        check_psd(q, &format!("Q at node {i}"), s.psd_tol)?;
        check_psd(r, &format!("R at node {i}"), s.psd_tol)?;
    }
    for (i, nmat) in out.weights.n.iter().enumerate() {
        let shifted = nmat - DMatrix::identity(mn, mn) * p.weights.delta;
        if linalg::min_eigenvalue(&shifted) < s.psd_tol {
            return Err(Error::NotPositive(format!(
                "N at node {i} is below delta * I (delta = {})",
                p.weights.delta
            )));
        }
    }

    Ok(ValidatedProblem { problem: out, settings: s.clone() })
}

fn accept_symmetric(m: &DMatrix<f64>, name: &str, tol: f64) -> Result<DMatrix<f64>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(name.into()));
    }
    let asym = linalg::max_asymmetry(m);
    if asym > tol {
        return Err(Error::NotPositive(format!(
            "{name} asymmetry {asym:.3e} exceeds the tolerance {tol:.1e}"
        )));
    }
    Ok(linalg::symmetrize(m))
}

fn symmetrize_path(path: &CoeffPath, name: &str, tol: f64) -> Result<CoeffPath> {
    let mut values = Vec::with_capacity(path.num_nodes());
    for (i, m) in path.iter().enumerate() {
        values.push(accept_symmetric(m, &format!("{name} at node {i}"), tol)?);
    }
    CoeffPath::from_nodes(values)
}

fn check_psd(m: &DMatrix<f64>, name: &str, psd_tol: f64) -> Result<()> {
    let lam = linalg::min_eigenvalue(m);
    if lam < psd_tol {
        return Err(Error::NotPositive(format!(
            "{name}: smallest eigenvalue {lam:.3e} below tolerance {psd_tol:.1e}"
        )));
    }
    Ok(())
}
