//! Seeded Brownian noise, forward simulation of linear SDEs, fundamental
//! solution matrices, Monte Carlo Gramian estimation and the
//! terminal-expectation representation oracle.
//!
//! Reproducibility contract: every operation is a pure function of its inputs
//! and the seed. Each path draws from its own counter-keyed stream, so
//! regenerating with the same `(seed, paths, grid)` gives bit-identical
//! increments regardless of how many workers run the path loop, and Monte
//! Carlo accumulators are always combined by pairwise reduction in path-index
//! order.
//!
//! The integrator is the explicit left-point scheme
//!
//! ```text
//! X_{i+1} = X_i + drift(s_i, X_i) h + diffusion(s_i, X_i) dW_i,
//! ```
//!
//! strong order 1/2, applied uniformly to vector- and matrix-valued states;
//! time integrals use left Riemann sums on the same grid so that quadrature
//! and discretization stay consistent with each other.

use nalgebra::{DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{CoeffPath, TimeGrid};
use crate::linalg;
use crate::problem::AffineTarget;

/// One independent random stream per path, keyed by `(seed, path index)`.
/// ChaCha streams make the draw sequence independent of scheduling.
pub(crate) fn path_stream(seed: u64, path: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Brownian increments for `paths` sample paths on a uniform grid; the single
/// source of randomness for every Monte Carlo routine.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEnsemble {
    seed: u64,
    grid: TimeGrid,
    increments: Vec<Vec<f64>>,
}

/// Draws `Normal(0, h)` increments for every path and step.
pub fn generate_noise(seed: u64, paths: usize, grid: &TimeGrid) -> NoiseEnsemble {
    assert!(paths >= 1, "need at least one path");
    let steps = grid.steps();
    let sqrt_h = grid.step().sqrt();
    let increments: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_stream(seed, p as u64);
            (0..steps)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * sqrt_h
                })
                .collect()
        })
        .collect();
    NoiseEnsemble { seed, grid: *grid, increments }
}

impl NoiseEnsemble {
    /// Wraps externally supplied increments (refinement studies, oracles).
    pub fn from_increments(seed: u64, grid: TimeGrid, increments: Vec<Vec<f64>>) -> Result<Self> {
        if increments.is_empty() {
            return Err(Error::DimensionMismatch("no paths".into()));
        }
        for (p, inc) in increments.iter().enumerate() {
            if inc.len() != grid.steps() {
                return Err(Error::DimensionMismatch(format!(
                    "path {p} has {} increments for {} steps",
                    inc.len(),
                    grid.steps()
                )));
            }
        }
        Ok(Self { seed, grid, increments })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn num_paths(&self) -> usize {
        self.increments.len()
    }

    pub fn increments(&self, path: usize) -> &[f64] {
        &self.increments[path]
    }

    /// Brownian values at the grid nodes (zero at the first node).
    pub fn cumulative(&self, path: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.grid.num_nodes());
        let mut acc = 0.0;
        w.push(acc);
        for dw in &self.increments[path] {
            acc += dw;
            w.push(acc);
        }
        w
    }

    /// Same Brownian paths viewed on a grid coarsened by `factor`: groups of
    /// `factor` consecutive increments are summed. Used for refinement
    /// studies with common random numbers.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsened(factor)?;
        let increments = self
            .increments
            .iter()
            .map(|inc| inc.chunks(factor).map(|c| c.iter().sum()).collect())
            .collect();
        Ok(Self { seed: self.seed, grid, increments })
    }
}

/// State that the left-point scheme can advance: dense vectors and matrices.
pub trait SdeState: Clone + Send + Sync {
    fn add_scaled(&mut self, coeff: f64, other: &Self);
    fn all_finite(&self) -> bool;
}

impl SdeState for DVector<f64> {
    fn add_scaled(&mut self, coeff: f64, other: &Self) {
        self.axpy(coeff, other, 1.0);
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

impl SdeState for DMatrix<f64> {
    fn add_scaled(&mut self, coeff: f64, other: &Self) {
        self.zip_apply(other, |s, o| *s += coeff * o);
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

/// Per-path trajectories of a simulated state, one value per grid node.
#[derive(Debug, Clone)]
pub struct PathEnsemble<S> {
    grid: TimeGrid,
    paths: Vec<Vec<S>>,
}

impl<S> PathEnsemble<S> {
    pub fn from_paths(grid: TimeGrid, paths: Vec<Vec<S>>) -> Result<Self> {
        for (p, path) in paths.iter().enumerate() {
            if path.len() != grid.num_nodes() {
                return Err(Error::DimensionMismatch(format!(
                    "path {p} has {} nodes, expected {}",
                    path.len(),
                    grid.num_nodes()
                )));
            }
        }
        Ok(Self { grid, paths })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn num_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn at(&self, path: usize, node: usize) -> &S {
        &self.paths[path][node]
    }

    pub fn path(&self, path: usize) -> &[S] {
        &self.paths[path]
    }
}

/// Left-point discretization of `dX = drift(s, X) ds + diffusion(s, X) dW`
/// for a linear (affine) drift/diffusion pair. `init` provides the state at
/// the first node, per path; coefficient closures receive the node index.
pub fn euler_linear_sde<S, I, Dr, Di>(
    noise: &NoiseEnsemble,
    init: I,
    drift: Dr,
    diffusion: Di,
) -> Result<PathEnsemble<S>>
where
    S: SdeState,
    I: Fn(usize) -> S + Sync,
    Dr: Fn(usize, &S) -> S + Sync,
    Di: Fn(usize, &S) -> S + Sync,
{
    let grid = *noise.grid();
    let h = grid.step();
    let paths: Vec<Vec<S>> = (0..noise.num_paths())
        .into_par_iter()
        .map(|p| {
            let dw = noise.increments(p);
            let mut x = init(p);
            let mut out = Vec::with_capacity(grid.num_nodes());
            out.push(x.clone());
            for (i, &dwi) in dw.iter().enumerate() {
                let d = drift(i, &x);
                let g = diffusion(i, &x);
                x.add_scaled(h, &d);
                x.add_scaled(dwi, &g);
                if !x.all_finite() {
                    return Err(Error::NonFinite(format!("state on path {p} after step {i}")));
                }
                out.push(x.clone());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    PathEnsemble::from_paths(grid, paths)
}

/// Which fundamental solution an ensemble represents. All three satisfy
/// `dX = -X c1 ds - X c2 dW` from the identity; they differ only in the
/// coefficient pair fed in (state/adjoint coefficients, the reduced pair, or
/// the hat-system pair).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FundamentalKind {
    Gamma,
    Phi,
    Pi,
}

/// Per-path fundamental solution matrices over the grid, together with the
/// coefficient pair that generated them.
#[derive(Debug, Clone)]
pub struct FundamentalEnsemble {
    pub kind: FundamentalKind,
    drift_coeff: CoeffPath,
    diffusion_coeff: CoeffPath,
    ens: PathEnsemble<DMatrix<f64>>,
}

impl FundamentalEnsemble {
    pub fn at(&self, path: usize, node: usize) -> &DMatrix<f64> {
        self.ens.at(path, node)
    }

    pub fn grid(&self) -> &TimeGrid {
        self.ens.grid()
    }

    pub fn num_paths(&self) -> usize {
        self.ens.num_paths()
    }

    pub fn coefficients(&self) -> (&CoeffPath, &CoeffPath) {
        (&self.drift_coeff, &self.diffusion_coeff)
    }

    /// Relative matrices `X(i0)^{-1} X(s)` for `s >= i0` on one path,
    /// computed through one LU factorization of `X(i0)`.
    pub fn relative_path(&self, path: usize, i0: usize) -> Result<Vec<DMatrix<f64>>> {
        let base = self.ens.at(path, i0).clone();
        let lu = base.lu();
        (i0..self.ens.grid().num_nodes())
            .map(|i| {
                lu.solve(self.ens.at(path, i)).ok_or_else(|| {
                    log::warn!("fundamental matrix singular at node {i0} on path {path}");
                    Error::Singular(format!("fundamental matrix at node {i0}, path {path}"))
                })
            })
            .collect()
    }
}

/// In-place step factor `I - c1 h - c2 dw` of the left-point scheme for
/// right-coefficient matrix SDEs.
fn fill_step_factor(
    cell: &mut DMatrix<f64>,
    c1: &DMatrix<f64>,
    c2: &DMatrix<f64>,
    h: f64,
    dw: f64,
) {
    let n = cell.nrows();
    for j in 0..n {
        for i in 0..n {
            let mut v = -h * c1[(i, j)] - dw * c2[(i, j)];
            if i == j {
                v += 1.0;
            }
            cell[(i, j)] = v;
        }
    }
}

/// Simulates `dX = -X c1 ds - X c2 dW`, `X = I` at the first node, for every
/// path of the ensemble.
pub fn fundamental_matrix(
    kind: FundamentalKind,
    coeff1: &CoeffPath,
    coeff2: &CoeffPath,
    noise: &NoiseEnsemble,
) -> Result<FundamentalEnsemble> {
    let n = check_square_pair(coeff1, coeff2, noise.grid())?;
    let ens = euler_linear_sde(
        noise,
        |_| DMatrix::identity(n, n),
        |i, x: &DMatrix<f64>| -x * coeff1.at(i),
        |i, x: &DMatrix<f64>| -x * coeff2.at(i),
    )?;
    Ok(FundamentalEnsemble {
        kind,
        drift_coeff: coeff1.clone(),
        diffusion_coeff: coeff2.clone(),
        ens,
    })
}

fn check_square_pair(coeff1: &CoeffPath, coeff2: &CoeffPath, grid: &TimeGrid) -> Result<usize> {
    coeff1.check_grid(grid, "drift coefficient")?;
    coeff2.check_grid(grid, "diffusion coefficient")?;
    let n = coeff1.rows();
    if coeff1.cols() != n || coeff2.rows() != n || coeff2.cols() != n {
        return Err(Error::DimensionMismatch(
            "fundamental-matrix coefficients must be square and same-sized".into(),
        ));
    }
    Ok(n)
}

/// Monte Carlo estimate of a controllability Gramian with per-entry standard
/// errors.
#[derive(Debug, Clone)]
pub struct GramianEstimate {
    pub psi_hat: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub t0: f64,
    pub t1: f64,
    pub paths: usize,
}

impl GramianEstimate {
    /// Largest entrywise deviation from `reference` measured in standard
    /// errors; deterministic entries (zero standard error) are measured
    /// against `se_floor` instead.
    pub fn max_z_score(&self, reference: &DMatrix<f64>, se_floor: f64) -> f64 {
        let mut worst = 0.0f64;
        for (i, r) in reference.iter().enumerate() {
            let se = self.se[i].max(se_floor);
            worst = worst.max((self.psi_hat[i] - r).abs() / se);
        }
        worst
    }
}

/// Estimates `E int_{t0}^{t1} (X(t0,s) Lhat(s)) (X(t0,s) Lhat(s))^T ds` where
/// `X` solves `dX = -X drift ds - X diff dW`. Each path contributes a left
/// Riemann sum of symmetric rank-`q` updates, so the estimate is symmetric
/// positive semidefinite by construction for any number of paths.
pub fn estimate_gramian(
    t0: f64,
    t1: f64,
    drift_coeff: &CoeffPath,
    diff_coeff: &CoeffPath,
    lhat: &CoeffPath,
    noise: &NoiseEnsemble,
) -> Result<GramianEstimate> {
    let grid = noise.grid();
    let n = check_square_pair(drift_coeff, diff_coeff, grid)?;
    lhat.check_grid(grid, "Lhat")?;
    if lhat.rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "Lhat has {} rows, expected {n}",
            lhat.rows()
        )));
    }
    let i0 = grid.index_of(t0)?;
    let i1 = grid.index_of(t1)?;
    if i0 >= i1 {
        return Err(Error::BadGrid(format!("need t0 < t1, got {t0} >= {t1}")));
    }
    let h = grid.step();
    let q = lhat.cols();

    let per_path: Vec<DMatrix<f64>> = (0..noise.num_paths())
        .into_par_iter()
        .map(|p| -> Result<DMatrix<f64>> {
            let dw = noise.increments(p);
            let mut x = DMatrix::identity(n, n);
            let mut cell = DMatrix::zeros(n, n);
            let mut next = DMatrix::zeros(n, n);
            let advance = |x: &mut DMatrix<f64>,
                           next: &mut DMatrix<f64>,
                           cell: &mut DMatrix<f64>,
                           i: usize| {
                fill_step_factor(cell, drift_coeff.at(i), diff_coeff.at(i), h, dw[i]);
                next.gemm(1.0, x, cell, 0.0);
                std::mem::swap(x, next);
            };
            for i in 0..i0 {
                advance(&mut x, &mut next, &mut cell, i);
            }
            let lu0 = if i0 > 0 { Some(x.clone().lu()) } else { None };
            let mut acc = DMatrix::zeros(n, n);
            let mut u = DMatrix::zeros(n, q);
            for i in i0..i1 {
                match &lu0 {
                    None => u.gemm(1.0, &x, lhat.at(i), 0.0),
                    Some(lu) => {
                        let rel = lu.solve(&x).ok_or_else(|| {
                            log::warn!("path {p}: fundamental matrix singular at node {i0}");
                            Error::Singular(format!("fundamental matrix at node {i0}, path {p}"))
                        })?;
                        u.gemm(1.0, &rel, lhat.at(i), 0.0);
                    }
                }
                accumulate_gram(&mut acc, &u, h);
                advance(&mut x, &mut next, &mut cell, i);
            }
            if !acc.all_finite() {
                return Err(Error::NonFinite(format!("Gramian integrand on path {p}")));
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let (psi_hat, se) = matrix_mean_and_se(&per_path);
    Ok(GramianEstimate { psi_hat, se, t0, t1, paths: noise.num_paths() })
}

/// `acc += h * u u^T`, written symmetrically.
fn accumulate_gram(acc: &mut DMatrix<f64>, u: &DMatrix<f64>, h: f64) {
    let n = u.nrows();
    let q = u.ncols();
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for k in 0..q {
                s += u[(i, k)] * u[(j, k)];
            }
            let v = acc[(i, j)] + h * s;
            acc[(i, j)] = v;
            acc[(j, i)] = v;
        }
    }
}

fn matrix_mean_and_se(samples: &[DMatrix<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = samples.len();
    let shape = samples[0].shape();
    let add = |a: &DMatrix<f64>, b: &DMatrix<f64>| a + b;
    let mean = linalg::pairwise_sum(samples, &add).expect("non-empty") / n as f64;
    if n == 1 {
        return (mean, DMatrix::zeros(shape.0, shape.1));
    }
    let sq: Vec<DMatrix<f64>> = samples
        .iter()
        .map(|s| {
            let d = s - &mean;
            d.component_mul(&d)
        })
        .collect();
    let var = linalg::pairwise_sum(&sq, &add).expect("non-empty") / (n - 1) as f64;
    let se = var.map(|v| (v / n as f64).sqrt());
    (mean, se)
}

fn vector_mean_and_se(samples: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
    let n = samples.len();
    let add = |a: &DVector<f64>, b: &DVector<f64>| a + b;
    let mean = linalg::pairwise_sum(samples, &add).expect("non-empty") / n as f64;
    if n == 1 {
        return (mean, DVector::zeros(samples[0].len()));
    }
    let sq: Vec<DVector<f64>> = samples
        .iter()
        .map(|s| {
            let d = s - &mean;
            d.component_mul(&d)
        })
        .collect();
    let var = linalg::pairwise_sum(&sq, &add).expect("non-empty") / (n - 1) as f64;
    let se = var.map(|v| (v / n as f64).sqrt());
    (mean, se)
}

/// Monte Carlo evaluation, at the first grid node, of the backward
/// representation
///
/// ```text
/// Y(t) = E[ G(t,T) eta - int_t^T G(t,s) f(s) ds ],
/// ```
///
/// where `G` solves `dG = -G a ds - G c dW`, `G(t) = I`, and the target is
/// realized per path as `eta = c0 + c1 W(T)`. Returns the estimate and
/// per-component standard errors. This is the independent oracle for the
/// backward offset process and for hat-system terminal expectations.
#[allow(clippy::needless_range_loop)] // node index addresses the coefficient paths too
pub fn represent_terminal_expectation(
    eta: &AffineTarget,
    f: Option<&CoeffPath>,
    a: &CoeffPath,
    c: &CoeffPath,
    noise: &NoiseEnsemble,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let grid = noise.grid();
    let n = check_square_pair(a, c, grid)?;
    if eta.c0.len() != n || eta.c1.len() != n {
        return Err(Error::DimensionMismatch("target dimension".into()));
    }
    if let Some(f) = f {
        f.check_grid(grid, "driver")?;
        if f.rows() != n || f.cols() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "driver must be {n}x1, got {}x{}",
                f.rows(),
                f.cols()
            )));
        }
    }
    let h = grid.step();
    let steps = grid.steps();

    let per_path: Vec<DVector<f64>> = (0..noise.num_paths())
        .into_par_iter()
        .map(|p| -> Result<DVector<f64>> {
            let dw = noise.increments(p);
            let mut g = DMatrix::identity(n, n);
            let mut cell = DMatrix::zeros(n, n);
            let mut next = DMatrix::zeros(n, n);
            let mut integral = DVector::zeros(n);
            let mut w = 0.0;
            for i in 0..steps {
                if let Some(f) = f {
                    // integral += h * g * f_i
                    let fi = f.at(i);
                    for r in 0..n {
                        let mut s = 0.0;
                        for k in 0..n {
                            s += g[(r, k)] * fi[(k, 0)];
                        }
                        integral[r] += h * s;
                    }
                }
                fill_step_factor(&mut cell, a.at(i), c.at(i), h, dw[i]);
                next.gemm(1.0, &g, &cell, 0.0);
                std::mem::swap(&mut g, &mut next);
                w += dw[i];
            }
            let eta_p = &eta.c0 + &eta.c1 * w;
            let value = g * eta_p - integral;
            if !value.all_finite() {
                return Err(Error::NonFinite(format!("representation value on path {p}")));
            }
            Ok(value)
        })
        .collect::<Result<_>>()?;

    Ok(vector_mean_and_se(&per_path))
}

/// LU factorization alias used by the caches in other modules.
pub(crate) type DynLu = nalgebra::linalg::LU<f64, Dyn, Dyn>;
