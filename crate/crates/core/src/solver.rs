//! End-to-end solve: optimal multiplier, forward adjoint simulation,
//! decoupling recovery of the optimal trajectories, cost evaluation and the
//! optimality verification battery.
//!
//! The multiplier solves the algebraic equation
//!
//! ```text
//! F (I + Sigma(t) G)^{-1} Sigma(t) F^T  lambda
//!     = -( F (I + Sigma(t) G)^{-1} phi(t) + b ),
//! ```
//!
//! any solution of which is optimal; the minimal-norm representative is
//! produced for reproducibility. The adjoint starts from
//! `y(t) = (I + G Sigma(t))^{-1} (F^T lambda - G phi(t))`, runs forward under
//!
//! ```text
//! dy = -[(A^T + Q Sigma) y + Q phi] ds - (I + R Sigma)^{-1}(K^T y + R beta) dW,
//! ```
//!
//! and the optimal trajectories are recovered algebraically:
//!
//! ```text
//! x = -(Sigma y + phi),
//! z = (I + Sigma R)^{-1}(Sigma K^T y - beta),
//! v = N^{-1} L^T y.
//! ```
//!
//! Since `Sigma(T) = 0` and `phi(T) = -eta` hold exactly, the recovered state
//! meets the target bit-exactly at the terminal node.

use nalgebra::{DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg;
use crate::mc::{self, NoiseEnsemble};
use crate::problem::ValidatedProblem;
use crate::riccati::{PhiCoeffs, SigmaPath};

/// Solution of the algebraic multiplier equation.
#[derive(Debug, Clone)]
pub struct MultiplierResult {
    pub lambda_star: DVector<f64>,
    /// `F (I + Sigma(t) G)^{-1} Sigma(t) F^T`, symmetric PSD.
    pub s_matrix: DMatrix<f64>,
    /// `-(F (I + Sigma(t) G)^{-1} phi(t) + b)`.
    pub rhs: DVector<f64>,
    /// `|S lambda - rhs|_2` of the produced solution.
    pub residual: f64,
    /// Always true: the minimal-norm representative is returned.
    pub minimal_norm: bool,
}

/// Per-path optimal trajectories plus the multiplier that generated them.
#[derive(Debug, Clone)]
pub struct OptimalEnsemble {
    grid: TimeGrid,
    /// Seed of the noise ensemble the trajectories were driven by.
    pub noise_seed: u64,
    pub lambda_star: DVector<f64>,
    pub y: Vec<Vec<DVector<f64>>>,
    pub x: Vec<Vec<DVector<f64>>>,
    pub z: Vec<Vec<DVector<f64>>>,
    pub v: Vec<Vec<DVector<f64>>>,
}

impl OptimalEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn num_paths(&self) -> usize {
        self.x.len()
    }

    /// Assembles an ensemble from externally built trajectories (perturbed
    /// controls, replays); shapes are checked against the grid.
    pub fn from_trajectories(
        grid: TimeGrid,
        noise_seed: u64,
        lambda_star: DVector<f64>,
        y: Vec<Vec<DVector<f64>>>,
        x: Vec<Vec<DVector<f64>>>,
        z: Vec<Vec<DVector<f64>>>,
        v: Vec<Vec<DVector<f64>>>,
    ) -> Result<Self> {
        let nodes = grid.num_nodes();
        for set in [&y, &x, &z, &v] {
            if set.len() != x.len() || set.iter().any(|p| p.len() != nodes) {
                return Err(Error::DimensionMismatch(
                    "trajectory sets must agree in paths and nodes".into(),
                ));
            }
        }
        Ok(Self { grid, noise_seed, lambda_star, y, x, z, v })
    }
}

/// Cost component breakdown: the initial-state weight and the three running
/// integrands.
#[derive(Debug, Clone, Copy, Default)]
pub struct CostBreakdown {
    pub initial: f64,
    pub state: f64,
    pub diffusion: f64,
    pub drift: f64,
}

/// Monte Carlo cost estimate with standard error and optional Lagrangian
/// value.
#[derive(Debug, Clone)]
pub struct CostEstimate {
    pub j_hat: f64,
    pub se: f64,
    pub lagrangian_j_hat: Option<f64>,
    pub breakdown: CostBreakdown,
}

/// Residuals reported with every solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveChecks {
    pub forward_consistency: f64,
    pub stationarity_r1: f64,
    pub stationarity_r2: f64,
    pub manifold_error: f64,
    pub terminal_error: f64,
}

/// Everything a full solve produces. Trajectories are not retained: the
/// cost and every residual check are folded per path, so the memory
/// footprint is independent of the path count. Call [`simulate_optimal`]
/// when the trajectories themselves are wanted.
#[derive(Debug)]
pub struct Solution {
    pub sigma: SigmaPath,
    pub phi: PhiCoeffs,
    pub multiplier: MultiplierResult,
    pub cost: CostEstimate,
    pub checks: SolveChecks,
}

/// Minimal-norm solution of the algebraic multiplier equation at the start
/// node. Fails with `TargetUnreachableFromManifold` when the least-squares
/// residual exceeds `lsq_residual_tol * (1 + |rhs|)`: by the range identity
/// for symmetric PSD factors, consistency of this equation is exactly
/// reachability of the target from the manifold.
pub fn solve_multiplier(
    sig: &SigmaPath,
    phi: &PhiCoeffs,
    p: &ValidatedProblem,
) -> Result<MultiplierResult> {
    let n = p.state_dim();
    let pr = p.problem();
    let sigma0 = sig.sigma(0);
    let g = &pr.weights.g;
    let f = &pr.manifold.f;

    let lu = (DMatrix::identity(n, n) + sigma0 * g).lu();
    let inv_sigma = lu
        .solve(sigma0)
        .ok_or_else(|| Error::NumericalFailure("I + Sigma G singular".into()))?;
    let s_matrix = linalg::symmetrize(&(f * inv_sigma * f.transpose()));
    let inv_phi = lu
        .solve(phi.offset(0))
        .ok_or_else(|| Error::NumericalFailure("I + Sigma G singular".into()))?;
    let rhs = -(f * inv_phi + &pr.manifold.b);

    let (lambda_star, residual) = linalg::pinv_solve_sym(&s_matrix, &rhs);
    let tolerance = p.settings().lsq_residual_tol * (1.0 + rhs.norm());
    if residual > tolerance {
        return Err(Error::TargetUnreachableFromManifold { residual, tolerance });
    }
    Ok(MultiplierResult { lambda_star, s_matrix, rhs, residual, minimal_norm: true })
}

/// Precomputed per-node data for the forward adjoint kernel.
struct SimContext<'a> {
    p: &'a ValidatedProblem,
    sig: &'a SigmaPath,
    phi: &'a PhiCoeffs,
    y0: DVector<f64>,
    n_chol: Vec<nalgebra::linalg::Cholesky<f64, Dyn>>,
}

fn sim_context<'a>(
    mult: &MultiplierResult,
    sig: &'a SigmaPath,
    phi: &'a PhiCoeffs,
    p: &'a ValidatedProblem,
) -> Result<SimContext<'a>> {
    let n = p.state_dim();
    let pr = p.problem();
    let g = &pr.weights.g;
    let lu = (DMatrix::identity(n, n) + g * sig.sigma(0)).lu();
    let y0 = lu
        .solve(&(pr.manifold.f.transpose() * &mult.lambda_star - g * phi.offset(0)))
        .ok_or_else(|| Error::NumericalFailure("I + G Sigma singular".into()))?;
    let n_chol = (0..p.grid().num_nodes())
        .map(|i| {
            pr.weights.n.at(i).clone().cholesky().ok_or_else(|| {
                Error::NumericalFailure(format!("N not positive definite at node {i}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimContext { p, sig, phi, y0, n_chol })
}

/// Reusable per-path buffers: the adjoint kernel runs allocation-free so
/// that large ensembles do not thrash the allocator.
struct PathWorkspace {
    y: DVector<f64>,
    phi: DVector<f64>,
    x: DVector<f64>,
    z: DVector<f64>,
    v: DVector<f64>,
    sigma_y_phi: DVector<f64>,
    drift: DVector<f64>,
    diffusion: DVector<f64>,
}

impl PathWorkspace {
    fn new(n: usize, mn: usize) -> Self {
        Self {
            y: DVector::zeros(n),
            phi: DVector::zeros(n),
            x: DVector::zeros(n),
            z: DVector::zeros(n),
            v: DVector::zeros(mn),
            sigma_y_phi: DVector::zeros(n),
            drift: DVector::zeros(n),
            diffusion: DVector::zeros(n),
        }
    }
}

/// Runs the adjoint along one noise path, handing `(node, y, x, z, v)` to the
/// visitor at every node.
#[allow(clippy::needless_range_loop)] // node index addresses several per-node caches
fn simulate_path<F>(
    ctx: &SimContext<'_>,
    dw: &[f64],
    ws: &mut PathWorkspace,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &DVector<f64>, &DVector<f64>, &DVector<f64>, &DVector<f64>),
{
    let pr = ctx.p.problem();
    let h = ctx.p.grid().step();
    let steps = ctx.p.grid().steps();
    ws.y.copy_from(&ctx.y0);
    let mut w = 0.0;
    for i in 0..=steps {
        let sigma = ctx.sig.sigma(i);
        let beta_i = ctx.phi.loading(i);
        // phi(s_i) = a_i + bc_i w.
        ws.phi.copy_from(ctx.phi.offset(i));
        ws.phi.axpy(w, beta_i, 1.0);

        // sigma_y_phi = Sigma y + phi; x = -(Sigma y + phi).
        ws.sigma_y_phi.gemv(1.0, sigma, &ws.y, 0.0);
        ws.sigma_y_phi += &ws.phi;
        ws.x.copy_from(&ws.sigma_y_phi);
        ws.x.neg_mut();

        // z = (I + Sigma R)^{-1} (Sigma K^T y - beta).
        ws.drift.gemv_tr(1.0, pr.k.at(i), &ws.y, 0.0); // scratch: K^T y
        ws.z.gemv(1.0, sigma, &ws.drift, 0.0);
        ws.z -= beta_i;
        if !ctx.sig.solve_sigma_r_mut(i, &mut ws.z) {
            return Err(Error::NumericalFailure(format!(
                "I + Sigma R singular at node {i}"
            )));
        }

        // v = N^{-1} L^T y.
        ws.v.gemv_tr(1.0, pr.l.at(i), &ws.y, 0.0);
        ctx.n_chol[i].solve_mut(&mut ws.v);

        visit(i, &ws.y, &ws.x, &ws.z, &ws.v);

        if i < steps {
            // drift = -(A^T y + Q (Sigma y + phi)).
            ws.drift.gemv_tr(-1.0, pr.a.at(i), &ws.y, 0.0);
            ws.drift.gemv(-1.0, pr.weights.q.at(i), &ws.sigma_y_phi, 1.0);
            // diffusion = -(I + R Sigma)^{-1} (K^T y + R beta).
            ws.diffusion.gemv_tr(1.0, pr.k.at(i), &ws.y, 0.0);
            ws.diffusion.gemv(1.0, pr.weights.r.at(i), beta_i, 1.0);
            if !ctx.sig.solve_r_sigma_mut(i, &mut ws.diffusion) {
                return Err(Error::NumericalFailure(format!(
                    "I + R Sigma singular at node {i}"
                )));
            }
            ws.diffusion.neg_mut();
            ws.y.axpy(h, &ws.drift, 1.0);
            ws.y.axpy(dw[i], &ws.diffusion, 1.0);
            if !ws.y.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite(format!("adjoint state after step {i}")));
            }
            w += dw[i];
        }
    }
    Ok(())
}

/// Simulates the optimal ensemble for a solved multiplier. The adjoint start
/// value is shared by every path; the per-path trajectories follow from the
/// decoupling recovery.
pub fn simulate_optimal(
    mult: &MultiplierResult,
    sig: &SigmaPath,
    phi: &PhiCoeffs,
    p: &ValidatedProblem,
    noise: &NoiseEnsemble,
) -> Result<OptimalEnsemble> {
    if noise.grid() != p.grid() {
        return Err(Error::DimensionMismatch("noise grid differs from problem grid".into()));
    }
    let ctx = sim_context(mult, sig, phi, p)?;
    let nodes = p.grid().num_nodes();

    struct PathOut {
        y: Vec<DVector<f64>>,
        x: Vec<DVector<f64>>,
        z: Vec<DVector<f64>>,
        v: Vec<DVector<f64>>,
    }
    let per_path: Vec<PathOut> = (0..noise.num_paths())
        .into_par_iter()
        .map(|pi| -> Result<PathOut> {
            let mut out = PathOut {
                y: Vec::with_capacity(nodes),
                x: Vec::with_capacity(nodes),
                z: Vec::with_capacity(nodes),
                v: Vec::with_capacity(nodes),
            };
            let mut ws = PathWorkspace::new(p.state_dim(), p.drift_control_dim());
            simulate_path(&ctx, noise.increments(pi), &mut ws, |_, y, x, z, v| {
                out.y.push(y.clone());
                out.x.push(x.clone());
                out.z.push(z.clone());
                out.v.push(v.clone());
            })?;
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut y = Vec::with_capacity(per_path.len());
    let mut x = Vec::with_capacity(per_path.len());
    let mut z = Vec::with_capacity(per_path.len());
    let mut v = Vec::with_capacity(per_path.len());
    for o in per_path {
        y.push(o.y);
        x.push(o.x);
        z.push(o.z);
        v.push(o.v);
    }
    Ok(OptimalEnsemble {
        grid: *p.grid(),
        noise_seed: noise.seed(),
        lambda_star: mult.lambda_star.clone(),
        y,
        x,
        z,
        v,
    })
}

/// Left-Riemann quadrature of the cost along every path of an ensemble; mean
/// and standard error across paths. With a multiplier the Lagrangian value
/// `J + 2 <F^T lambda, x(t)>` is reported as well.
pub fn evaluate_cost(
    ens: &OptimalEnsemble,
    p: &ValidatedProblem,
    lambda: Option<&DVector<f64>>,
) -> CostEstimate {
    let pr = p.problem();
    let h = p.grid().step();
    let steps = p.grid().steps();
    let paths = ens.num_paths();

    let mut js = Vec::with_capacity(paths);
    let mut jls = Vec::with_capacity(paths);
    let mut initials = Vec::with_capacity(paths);
    let mut states = Vec::with_capacity(paths);
    let mut diffusions = Vec::with_capacity(paths);
    let mut drifts = Vec::with_capacity(paths);
    for pi in 0..paths {
        let x0 = &ens.x[pi][0];
        let initial = (&pr.weights.g * x0).dot(x0);
        let mut state = 0.0;
        let mut diffusion = 0.0;
        let mut drift = 0.0;
        for i in 0..steps {
            let x = &ens.x[pi][i];
            let z = &ens.z[pi][i];
            let v = &ens.v[pi][i];
            state += h * (pr.weights.q.at(i) * x).dot(x);
            diffusion += h * (pr.weights.r.at(i) * z).dot(z);
            drift += h * (pr.weights.n.at(i) * v).dot(v);
        }
        let j = initial + state + diffusion + drift;
        js.push(j);
        if let Some(l) = lambda {
            jls.push(j + 2.0 * (pr.manifold.f.transpose() * l).dot(x0));
        }
        initials.push(initial);
        states.push(state);
        diffusions.push(diffusion);
        drifts.push(drift);
    }

    let (j_hat, se) = linalg::mean_and_se(&js);
    let lagrangian_j_hat = lambda.map(|_| linalg::mean_and_se(&jls).0);
    let mean = |xs: &[f64]| linalg::pairwise_sum_f64(xs) / paths as f64;
    CostEstimate {
        j_hat,
        se,
        lagrangian_j_hat,
        breakdown: CostBreakdown {
            initial: mean(&initials),
            state: mean(&states),
            diffusion: mean(&diffusions),
            drift: mean(&drifts),
        },
    }
}

/// Re-integrates the state equation forward from `x(t)` with the recovered
/// controls under the same increments and returns the largest deviation from
/// the decoupling-recovered state, over all paths and nodes. This certifies
/// that the recovered trajectory solves the controlled equation.
#[allow(clippy::needless_range_loop)]
pub fn forward_consistency_check(
    ens: &OptimalEnsemble,
    p: &ValidatedProblem,
    noise: &NoiseEnsemble,
) -> Result<f64> {
    if noise.grid() != p.grid() || noise.num_paths() != ens.num_paths() {
        return Err(Error::DimensionMismatch("noise does not match the ensemble".into()));
    }
    let pr = p.problem();
    let h = p.grid().step();
    let steps = p.grid().steps();
    let worst = (0..ens.num_paths())
        .into_par_iter()
        .map(|pi| {
            let dw = noise.increments(pi);
            let mut x = ens.x[pi][0].clone();
            let mut dev = 0.0f64;
            for i in 0..steps {
                let z = &ens.z[pi][i];
                let v = &ens.v[pi][i];
                let drift = pr.a.at(i) * &x + pr.k.at(i) * z + pr.l.at(i) * v;
                x.axpy(h, &drift, 1.0);
                x.axpy(dw[i], z, 1.0);
                dev = dev.max((&x - &ens.x[pi][i + 1]).amax());
            }
            dev
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

/// Stationarity residuals: `r1 = max |N v - L^T y|` over all paths and nodes
/// (zero by construction, kept as a regression guard) and
/// `r2 = |y(t) - G x(t) - F^T lambda|`, which exercises the decoupling
/// algebra at the anchor node.
pub fn stationarity_check(
    ens: &OptimalEnsemble,
    mult: &MultiplierResult,
    p: &ValidatedProblem,
) -> (f64, f64) {
    let pr = p.problem();
    let steps = p.grid().steps();
    let mut r1 = 0.0f64;
    let mut r2 = 0.0f64;
    let f_t_lambda = pr.manifold.f.transpose() * &mult.lambda_star;
    for pi in 0..ens.num_paths() {
        for i in 0..=steps {
            let defect = pr.weights.n.at(i) * &ens.v[pi][i]
                - pr.l.at(i).transpose() * &ens.y[pi][i];
            r1 = r1.max(defect.amax());
        }
        let defect0 = &ens.y[pi][0] - &pr.weights.g * &ens.x[pi][0] - &f_t_lambda;
        r2 = r2.max(defect0.norm());
    }
    (r1, r2)
}

/// One perturbation-direction outcome of the optimality check.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationOutcome {
    /// `J_lambda(v + eps w) - J_lambda(v)` on common noise.
    pub delta_j: f64,
    /// Standard error of `delta_j` across paths.
    pub se: f64,
    /// Central difference `(J_lambda(v + eps w) - J_lambda(v - eps w)) / 2 eps`.
    pub linear_term: f64,
    /// Standard error of the central difference.
    pub se_linear: f64,
}

/// Deterministic perturbation directions: low-degree polynomials alternating
/// with piecewise-constant bang-bang profiles, all with seeded coefficients.
pub fn perturbation_directions(
    p: &ValidatedProblem,
    count: usize,
    seed: u64,
) -> Vec<Vec<DVector<f64>>> {
    let nodes = p.grid().num_nodes();
    let steps = p.grid().steps();
    let mn = p.drift_control_dim();
    (0..count)
        .map(|d| {
            let mut rng = mc::path_stream(seed, d as u64);
            if d % 2 == 0 {
                let coeffs: Vec<[f64; 4]> = (0..mn)
                    .map(|_| {
                        [
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ]
                    })
                    .collect();
                (0..nodes)
                    .map(|i| {
                        let tau = i as f64 / steps as f64;
                        DVector::from_fn(mn, |c, _| {
                            let k = &coeffs[c];
                            k[0] + tau * (k[1] + tau * (k[2] + tau * k[3]))
                        })
                    })
                    .collect()
            } else {
                let switch = rng.random_range(1..steps);
                let levels: Vec<(f64, f64)> = (0..mn)
                    .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                    .collect();
                (0..nodes)
                    .map(|i| {
                        DVector::from_fn(mn, |c, _| {
                            if i < switch {
                                levels[c].0
                            } else {
                                levels[c].1
                            }
                        })
                    })
                    .collect()
            }
        })
        .collect()
}

/// Deterministic state response to a drift-control direction: the backward
/// system `xt' = A xt + L w`, `xt(T) = 0`, integrated with the same
/// stepping rule as the other backward solvers. For a deterministic `w` this
/// is exactly the perturbed-state offset (the diffusion component of the
/// terminal-zero backward equation vanishes).
fn direction_response(p: &ValidatedProblem, w: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let pr = p.problem();
    let n = p.state_dim();
    let steps = p.grid().steps();
    let sub = p.settings().ode_substeps;
    let tau = -p.grid().step() / sub as f64;
    let mut xt = vec![DVector::zeros(n); steps + 1];
    for i in (0..steps).rev() {
        let a = pr.a.at(i);
        let l = pr.l.at(i);
        let forcing = l * &w[i];
        let deriv = |x: &DVector<f64>| a * x + &forcing;
        let mut x = xt[i + 1].clone();
        for _ in 0..sub {
            let k1 = deriv(&x);
            let k2 = deriv(&(&x + &k1 * (tau / 2.0)));
            let k3 = deriv(&(&x + &k2 * (tau / 2.0)));
            let k4 = deriv(&(&x + &k3 * tau));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (tau / 6.0);
        }
        xt[i] = x;
    }
    xt
}

fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = m.nrows();
    let mut s = 0.0;
    for j in 0..n {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for i in 0..n {
            s += x[i] * m[(i, j)] * xj;
        }
    }
    s
}

/// First- and second-order optimality evidence: for each deterministic
/// direction `w`, evaluates `J_lambda(v +/- eps w)` and `J_lambda(v)` on
/// common noise per path and reports the cost increase and the central
/// difference. At the optimum every `delta_j` is nonnegative up to Monte
/// Carlo error and every linear term vanishes.
pub fn perturbation_optimality_check(
    mult: &MultiplierResult,
    sig: &SigmaPath,
    phi: &PhiCoeffs,
    p: &ValidatedProblem,
    noise: &NoiseEnsemble,
    directions: &[Vec<DVector<f64>>],
    eps: f64,
) -> Result<Vec<PerturbationOutcome>> {
    if noise.grid() != p.grid() {
        return Err(Error::DimensionMismatch("noise grid differs from problem grid".into()));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::DimensionMismatch("eps must be positive".into()));
    }
    let pr = p.problem();
    let n = p.state_dim();
    let mn = p.drift_control_dim();
    let steps = p.grid().steps();
    let nodes = steps + 1;
    let h = p.grid().step();
    let ctx = sim_context(mult, sig, phi, p)?;
    let f_t_lambda = pr.manifold.f.transpose() * &mult.lambda_star;

    for (d, w) in directions.iter().enumerate() {
        if w.len() != nodes || w.iter().any(|wi| wi.len() != mn) {
            return Err(Error::DimensionMismatch(format!(
                "direction {d} does not match the grid or control dimension"
            )));
        }
    }
    // Flattened deterministic responses, one per direction.
    let responses: Vec<Vec<f64>> = directions
        .iter()
        .map(|w| {
            let xt = direction_response(p, w);
            let mut flat = vec![0.0; nodes * n];
            for (i, v) in xt.iter().enumerate() {
                flat[i * n..(i + 1) * n].copy_from_slice(v.as_slice());
            }
            flat
        })
        .collect();
    let w_flat: Vec<Vec<f64>> = directions
        .iter()
        .map(|w| {
            let mut flat = vec![0.0; nodes * mn];
            for (i, v) in w.iter().enumerate() {
                flat[i * mn..(i + 1) * mn].copy_from_slice(v.as_slice());
            }
            flat
        })
        .collect();

    struct PathCosts {
        deltas: Vec<f64>,
        lins: Vec<f64>,
    }
    let per_path: Vec<PathCosts> = (0..noise.num_paths())
        .into_par_iter()
        .map(|pi| -> Result<PathCosts> {
            // Base trajectory, flattened; the diffusion-control term is
            // unchanged by the perturbation and enters every cost equally.
            let mut xs = vec![0.0; nodes * n];
            let mut vs = vec![0.0; nodes * mn];
            let mut rz_sum = 0.0;
            {
                let mut ws = PathWorkspace::new(n, mn);
                let mut node = 0usize;
                simulate_path(&ctx, noise.increments(pi), &mut ws, |i, _, x, z, v| {
                    xs[i * n..(i + 1) * n].copy_from_slice(x.as_slice());
                    vs[i * mn..(i + 1) * mn].copy_from_slice(v.as_slice());
                    if i < steps {
                        rz_sum += h * quad_form(pr.weights.r.at(i), z.as_slice());
                    }
                    node = i;
                })?;
                debug_assert_eq!(node, steps);
            }

            let mut xbuf = vec![0.0; n];
            let mut vbuf = vec![0.0; mn];
            let mut cost_at = |scale: f64, xt: &[f64], w: &[f64]| -> f64 {
                for c in 0..n {
                    xbuf[c] = xs[c] + scale * xt[c];
                }
                let g_term = quad_form(&pr.weights.g, &xbuf);
                let mut lagr = 0.0;
                for c in 0..n {
                    lagr += f_t_lambda[c] * xbuf[c];
                }
                let mut running = rz_sum;
                for i in 0..steps {
                    for c in 0..n {
                        xbuf[c] = xs[i * n + c] + scale * xt[i * n + c];
                    }
                    for c in 0..mn {
                        vbuf[c] = vs[i * mn + c] + scale * w[i * mn + c];
                    }
                    running += h * quad_form(pr.weights.q.at(i), &xbuf);
                    running += h * quad_form(pr.weights.n.at(i), &vbuf);
                }
                g_term + 2.0 * lagr + running
            };

            let zeros_x = vec![0.0; nodes * n];
            let zeros_w = vec![0.0; nodes * mn];
            let j_base = cost_at(0.0, &zeros_x, &zeros_w);
            let mut deltas = Vec::with_capacity(directions.len());
            let mut lins = Vec::with_capacity(directions.len());
            for d in 0..directions.len() {
                let j_plus = cost_at(eps, &responses[d], &w_flat[d]);
                let j_minus = cost_at(-eps, &responses[d], &w_flat[d]);
                deltas.push(j_plus - j_base);
                lins.push((j_plus - j_minus) / (2.0 * eps));
            }
            Ok(PathCosts { deltas, lins })
        })
        .collect::<Result<_>>()?;

    let outcomes = (0..directions.len())
        .map(|d| {
            let deltas: Vec<f64> = per_path.iter().map(|c| c.deltas[d]).collect();
            let lins: Vec<f64> = per_path.iter().map(|c| c.lins[d]).collect();
            let (delta_j, se) = linalg::mean_and_se(&deltas);
            let (linear_term, se_linear) = linalg::mean_and_se(&lins);
            PerturbationOutcome { delta_j, se, linear_term, se_linear }
        })
        .collect();
    Ok(outcomes)
}

/// Per-path fold of the cost quadrature and every residual check; nothing is
/// stored per node.
struct PathSummary {
    j: f64,
    j_lagrangian: f64,
    initial: f64,
    state: f64,
    diffusion: f64,
    drift: f64,
    forward_dev: f64,
    r1: f64,
    r2: f64,
    terminal_error: f64,
    manifold_error: f64,
}

fn summarize_path(
    ctx: &SimContext<'_>,
    dw: &[f64],
    ws: &mut PathWorkspace,
    scratch: &mut ForwardScratch,
) -> Result<PathSummary> {
    let p = ctx.p;
    let pr = p.problem();
    let h = p.grid().step();
    let steps = p.grid().steps();
    let mut s = PathSummary {
        j: 0.0,
        j_lagrangian: 0.0,
        initial: 0.0,
        state: 0.0,
        diffusion: 0.0,
        drift: 0.0,
        forward_dev: 0.0,
        r1: 0.0,
        r2: 0.0,
        terminal_error: 0.0,
        manifold_error: 0.0,
    };
    let mut w = 0.0;
    simulate_path(ctx, dw, ws, |i, y, x, z, v| {
        if i == 0 {
            s.initial = quad_form(&pr.weights.g, x.as_slice());
            let mut lagr = 0.0;
            for c in 0..x.len() {
                lagr += scratch.f_t_lambda[c] * x[c];
            }
            s.j_lagrangian = 2.0 * lagr;
            scratch.fx.gemv(1.0, &pr.manifold.f, x, 0.0);
            s.manifold_error = (&scratch.fx - &pr.manifold.b).norm();
            scratch.defect0.copy_from(y);
            scratch.defect0.gemv(-1.0, &pr.weights.g, x, 1.0);
            scratch.defect0 -= &scratch.f_t_lambda;
            s.r2 = scratch.defect0.norm();
            scratch.x_fwd.copy_from(x);
        } else {
            s.forward_dev = s.forward_dev.max((&scratch.x_fwd - x).amax());
        }
        scratch.r1_defect.gemv(1.0, pr.weights.n.at(i), v, 0.0);
        scratch.r1_defect.gemv_tr(-1.0, pr.l.at(i), y, 1.0);
        s.r1 = s.r1.max(scratch.r1_defect.amax());
        if i < steps {
            s.state += h * quad_form(pr.weights.q.at(i), x.as_slice());
            s.diffusion += h * quad_form(pr.weights.r.at(i), z.as_slice());
            s.drift += h * quad_form(pr.weights.n.at(i), v.as_slice());
            // Advance the re-integrated state with the recovered controls.
            scratch.step.gemv(1.0, pr.a.at(i), &scratch.x_fwd, 0.0);
            scratch.step.gemv(1.0, pr.k.at(i), z, 1.0);
            scratch.step.gemv(1.0, pr.l.at(i), v, 1.0);
            scratch.x_fwd.axpy(h, &scratch.step, 1.0);
            scratch.x_fwd.axpy(dw[i], z, 1.0);
            w += dw[i];
        } else {
            scratch.eta.copy_from(&pr.target.c0);
            scratch.eta.axpy(w, &pr.target.c1, 1.0);
            s.terminal_error = (x - &scratch.eta).amax();
        }
    })?;
    s.j = s.initial + s.state + s.diffusion + s.drift;
    s.j_lagrangian += s.j;
    Ok(s)
}

struct ForwardScratch {
    f_t_lambda: DVector<f64>,
    fx: DVector<f64>,
    defect0: DVector<f64>,
    r1_defect: DVector<f64>,
    x_fwd: DVector<f64>,
    step: DVector<f64>,
    eta: DVector<f64>,
}

impl ForwardScratch {
    fn new(p: &ValidatedProblem, f_t_lambda: DVector<f64>) -> Self {
        let n = p.state_dim();
        Self {
            f_t_lambda,
            fx: DVector::zeros(p.problem().manifold_rows()),
            defect0: DVector::zeros(n),
            r1_defect: DVector::zeros(p.drift_control_dim()),
            x_fwd: DVector::zeros(n),
            step: DVector::zeros(n),
            eta: DVector::zeros(n),
        }
    }
}

/// Full solve: Riccati, target ODEs, multiplier, then one streaming pass
/// over the Monte Carlo ensemble that folds the cost quadrature and every
/// residual check per path. Memory use is independent of the path count.
pub fn solve_pipeline(p: &ValidatedProblem) -> Result<Solution> {
    let sigma = crate::riccati::solve_sigma(p)?;
    let phi = crate::riccati::solve_target_odes(&sigma, &p.problem().target, p)?;
    let multiplier = solve_multiplier(&sigma, &phi, p)?;
    let noise = mc::generate_noise(p.settings().seed, p.settings().mc_paths, p.grid());
    let ctx = sim_context(&multiplier, &sigma, &phi, p)?;
    let f_t_lambda = p.problem().manifold.f.transpose() * &multiplier.lambda_star;

    let summaries: Vec<PathSummary> = (0..noise.num_paths())
        .into_par_iter()
        .map(|pi| {
            let mut ws = PathWorkspace::new(p.state_dim(), p.drift_control_dim());
            let mut scratch = ForwardScratch::new(p, f_t_lambda.clone());
            summarize_path(&ctx, noise.increments(pi), &mut ws, &mut scratch)
        })
        .collect::<Result<_>>()?;

    let js: Vec<f64> = summaries.iter().map(|s| s.j).collect();
    let jls: Vec<f64> = summaries.iter().map(|s| s.j_lagrangian).collect();
    let (j_hat, se) = linalg::mean_and_se(&js);
    let paths = summaries.len() as f64;
    let mean_of = |pick: fn(&PathSummary) -> f64| {
        let xs: Vec<f64> = summaries.iter().map(pick).collect();
        linalg::pairwise_sum_f64(&xs) / paths
    };
    let max_of = |pick: fn(&PathSummary) -> f64| {
        summaries.iter().map(pick).fold(0.0f64, f64::max)
    };
    let cost = CostEstimate {
        j_hat,
        se,
        lagrangian_j_hat: Some(linalg::mean_and_se(&jls).0),
        breakdown: CostBreakdown {
            initial: mean_of(|s| s.initial),
            state: mean_of(|s| s.state),
            diffusion: mean_of(|s| s.diffusion),
            drift: mean_of(|s| s.drift),
        },
    };
    Ok(Solution {
        sigma,
        phi,
        multiplier,
        cost,
        checks: SolveChecks {
            forward_consistency: max_of(|s| s.forward_dev),
            stationarity_r1: max_of(|s| s.r1),
            stationarity_r2: max_of(|s| s.r2),
            manifold_error: max_of(|s| s.manifold_error),
            terminal_error: max_of(|s| s.terminal_error),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc::generate_noise;
    use crate::problem::{validate_problem, SolverSettings};
    use crate::riccati::{solve_sigma, solve_target_odes};
    use crate::testkit;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};

    fn settings(paths: usize, seed: u64) -> SolverSettings {
        SolverSettings { mc_paths: paths, seed, ..Default::default() }
    }

    fn prepared(
        p: &crate::problem::CanonicalProblem,
        s: &SolverSettings,
    ) -> (ValidatedProblem, SigmaPath, PhiCoeffs) {
        let v = validate_problem(p, s).unwrap();
        let sig = solve_sigma(&v).unwrap();
        let phi = solve_target_odes(&sig, &v.problem().target, &v).unwrap();
        (v, sig, phi)
    }

    #[test]
    fn scalar_multiplier_closed_forms() {
        let s = settings(16, 1);
        // Minimum energy: S = 1, rhs = -(-1 + 0.3) = 0.7.
        let (v, sig, phi) = prepared(&testkit::scalar_min_energy(2000), &s);
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        assert_abs_diff_eq!(m.lambda_star[0], 0.7, epsilon = 1e-10);
        assert_abs_diff_eq!(m.s_matrix[(0, 0)], 1.0, epsilon = 1e-10);
        assert!(m.minimal_norm);

        // Initial-state weight G = 1: S = 0.5, rhs = 0.2, lambda = 0.4.
        let (v, sig, phi) = prepared(&testkit::scalar_weighted_start(2000), &s);
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        assert_abs_diff_eq!(m.lambda_star[0], 0.4, epsilon = 1e-10);
        assert_abs_diff_eq!(m.s_matrix[(0, 0)], 0.5, epsilon = 1e-10);

        // Noise target with b = 0: zero right-hand side, minimal-norm zero.
        let (v, sig, phi) = prepared(&testkit::scalar_noise_target(2000), &s);
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        assert_abs_diff_eq!(m.lambda_star[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.rhs[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_full_pin_is_reported_unreachable() {
        let s = settings(16, 1);
        let (v, sig, phi) = prepared(&testkit::planar_rank_deficient(500), &s);
        let err = solve_multiplier(&sig, &phi, &v).unwrap_err();
        match err {
            Error::TargetUnreachableFromManifold { residual, .. } => {
                assert!(residual >= 0.5, "residual {residual}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn minimum_energy_trajectories() {
        let s = settings(100, 11);
        let (v, sig, phi) = prepared(&testkit::scalar_min_energy(2000), &s);
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        let noise = generate_noise(s.seed, s.mc_paths, v.grid());
        let ens = simulate_optimal(&m, &sig, &phi, &v, &noise).unwrap();
        for pi in 0..ens.num_paths() {
            assert_abs_diff_eq!(ens.y[pi][0][0], 0.7, epsilon = 1e-10);
            assert_abs_diff_eq!(ens.y[pi][2000][0], 0.7, epsilon = 1e-10);
            assert_abs_diff_eq!(ens.v[pi][1000][0], 0.7, epsilon = 1e-10);
            assert_abs_diff_eq!(ens.z[pi][1000][0], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ens.x[pi][0][0], 0.3, epsilon = 1e-10);
            assert_abs_diff_eq!(ens.x[pi][2000][0], 1.0, epsilon = 1e-12);
            // Interior: x(s) = 1 - 0.7 (1 - s).
            let smid = v.grid().node(700);
            assert_abs_diff_eq!(ens.x[pi][700][0], 1.0 - 0.7 * (1.0 - smid), epsilon = 1e-10);
        }
    }

    #[test]
    fn noise_target_rides_the_brownian_path() {
        let s = settings(50, 13);
        let (v, sig, phi) = prepared(&testkit::scalar_noise_target(500), &s);
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        let noise = generate_noise(s.seed, s.mc_paths, v.grid());
        let ens = simulate_optimal(&m, &sig, &phi, &v, &noise).unwrap();
        for pi in 0..ens.num_paths() {
            let w = noise.cumulative(pi);
            assert_abs_diff_eq!(ens.z[pi][100][0], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ens.v[pi][100][0], 0.0, epsilon = 1e-14);
            for i in [0usize, 250, 500] {
                assert_abs_diff_eq!(ens.x[pi][i][0], w[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn planar_partial_pin_trajectories() {
        let s = settings(10, 17);
        let (v, sig, phi) = prepared(&testkit::planar_partial_pin(1000), &s);
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        assert_abs_diff_eq!(m.lambda_star[0], 1.0, epsilon = 1e-10);
        let noise = generate_noise(s.seed, s.mc_paths, v.grid());
        let ens = simulate_optimal(&m, &sig, &phi, &v, &noise).unwrap();
        for pi in 0..ens.num_paths() {
            assert_abs_diff_eq!(ens.y[pi][400][0], 1.0, epsilon = 1e-10);
            assert_abs_diff_eq!(ens.y[pi][400][1], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ens.v[pi][400][0], 1.0, epsilon = 1e-10);
            let sm = v.grid().node(400);
            assert_abs_diff_eq!(ens.x[pi][400][0], sm, epsilon = 1e-10);
            assert_abs_diff_eq!(ens.x[pi][400][1], 1.0, epsilon = 1e-10);
            // Manifold: first component starts at zero.
            assert_abs_diff_eq!(ens.x[pi][0][0], 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn cost_closed_forms() {
        let s = settings(100, 19);
        let (v, sig, phi) = prepared(&testkit::scalar_min_energy(2000), &s);
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        let noise = generate_noise(s.seed, s.mc_paths, v.grid());
        let ens = simulate_optimal(&m, &sig, &phi, &v, &noise).unwrap();
        let cost = evaluate_cost(&ens, &v, Some(&m.lambda_star));
        // (eta - b)^2 / (T - t) = 0.49; the trajectory is deterministic.
        assert_abs_diff_eq!(cost.j_hat, 0.49, epsilon = 1e-4);
        assert!(cost.se <= 1e-12);
        assert_abs_diff_eq!(
            cost.lagrangian_j_hat.unwrap(),
            0.49 + 2.0 * 0.7 * 0.3,
            epsilon = 1e-4
        );
        assert_abs_diff_eq!(cost.breakdown.drift, 0.49, epsilon = 1e-4);
        assert_eq!(cost.breakdown.initial, 0.0);
        assert_eq!(cost.breakdown.state, 0.0);
        assert_eq!(cost.breakdown.diffusion, 0.0);

        // Without a multiplier the Lagrangian value is absent and j matches.
        let plain = evaluate_cost(&ens, &v, None);
        assert_eq!(plain.lagrangian_j_hat, None);
        assert_abs_diff_eq!(plain.j_hat, cost.j_hat);

        // Zero multiplier collapses the Lagrangian onto the plain cost.
        let zero_l = evaluate_cost(&ens, &v, Some(&dvector![0.0]));
        assert_eq!(zero_l.lagrangian_j_hat.unwrap(), zero_l.j_hat);

        // Zero-cost benchmark: everything in the integrand vanishes.
        let (v, sig, phi) = prepared(&testkit::scalar_noise_target(500), &s);
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        let noise = generate_noise(s.seed, 32, v.grid());
        let ens = simulate_optimal(&m, &sig, &phi, &v, &noise).unwrap();
        let cost = evaluate_cost(&ens, &v, Some(&m.lambda_star));
        assert_abs_diff_eq!(cost.j_hat, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn forward_consistency_is_exact_for_euler_exact_benchmarks() {
        let s = settings(100, 23);
        for p in [testkit::scalar_min_energy(2000), testkit::scalar_noise_target(2000)] {
            let (v, sig, phi) = prepared(&p, &s);
            let m = solve_multiplier(&sig, &phi, &v).unwrap();
            let noise = generate_noise(s.seed, s.mc_paths, v.grid());
            let ens = simulate_optimal(&m, &sig, &phi, &v, &noise).unwrap();
            let dev = forward_consistency_check(&ens, &v, &noise).unwrap();
            assert!(dev <= 1e-12, "deviation {dev}");
        }
    }

    #[test]
    fn forward_consistency_converges_with_the_step() {
        let fine = crate::grid::TimeGrid::new(0.0, 1.0, 512).unwrap();
        let master = generate_noise(29, 200, &fine);
        let mut devs = Vec::new();
        for factor in [8usize, 4, 2, 1] {
            let noise = master.coarsened(factor).unwrap();
            let p = testkit::scalar_with_feedback(noise.grid().steps());
            let s = settings(200, 29);
            let (v, sig, phi) = prepared(&p, &s);
            let m = solve_multiplier(&sig, &phi, &v).unwrap();
            let ens = simulate_optimal(&m, &sig, &phi, &v, &noise).unwrap();
            devs.push(forward_consistency_check(&ens, &v, &noise).unwrap());
        }
        for pair in devs.windows(2) {
            assert!(pair[1] < pair[0], "not strictly decreasing: {devs:?}");
        }
    }

    #[test]
    fn stationarity_residuals() {
        let s = settings(64, 31);
        for (name, p) in testkit::solvable_benchmarks(500) {
            let (v, sig, phi) = prepared(&p, &s);
            let m = solve_multiplier(&sig, &phi, &v).unwrap();
            let noise = generate_noise(s.seed, s.mc_paths, v.grid());
            let ens = simulate_optimal(&m, &sig, &phi, &v, &noise).unwrap();
            let (r1, r2) = stationarity_check(&ens, &m, &v);
            assert!(r1 <= 1e-14, "{name}: r1 = {r1}");
            assert!(r2 <= 1e-10, "{name}: r2 = {r2}");
        }
    }

    #[test]
    fn trajectory_is_invariant_to_the_initial_weight_when_fully_pinned() {
        // Same manifold pins x(t) completely; G changes lambda but not the
        // optimal trajectory.
        let s = settings(32, 37);
        let (va, siga, phia) = prepared(&testkit::scalar_min_energy(1000), &s);
        let ma = solve_multiplier(&siga, &phia, &va).unwrap();
        let (ve, sige, phie) = prepared(&testkit::scalar_weighted_start(1000), &s);
        let me = solve_multiplier(&sige, &phie, &ve).unwrap();
        assert_abs_diff_eq!(ma.lambda_star[0], 0.7, epsilon = 1e-10);
        assert_abs_diff_eq!(me.lambda_star[0], 0.4, epsilon = 1e-10);

        let noise = generate_noise(s.seed, s.mc_paths, va.grid());
        let ea = simulate_optimal(&ma, &siga, &phia, &va, &noise).unwrap();
        let ee = simulate_optimal(&me, &sige, &phie, &ve, &noise).unwrap();
        for pi in 0..ea.num_paths() {
            for i in 0..=1000 {
                assert!((&ea.x[pi][i] - &ee.x[pi][i]).amax() <= 1e-10);
                assert!((&ea.v[pi][i] - &ee.v[pi][i]).amax() <= 1e-10);
            }
        }
    }

    #[test]
    fn perturbation_expansion_is_exact_on_the_deterministic_benchmark() {
        let s = settings(100, 41);
        let (v, sig, phi) = prepared(&testkit::scalar_min_energy(2000), &s);
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        let noise = generate_noise(s.seed, s.mc_paths, v.grid());
        let ones = vec![vec![dvector![1.0]; v.grid().num_nodes()]];
        let out =
            perturbation_optimality_check(&m, &sig, &phi, &v, &noise, &ones, 0.1).unwrap();
        // delta J = eps^2 int N w^2 = 0.01; the linear part cancels between
        // the running term and the multiplier term.
        assert_abs_diff_eq!(out[0].delta_j, 0.01, epsilon = 1e-4);
        assert!(out[0].linear_term.abs() <= 1e-6, "linear {}", out[0].linear_term);

        let zeros = vec![vec![dvector![0.0]; v.grid().num_nodes()]];
        let out =
            perturbation_optimality_check(&m, &sig, &phi, &v, &noise, &zeros, 0.1).unwrap();
        assert_eq!(out[0].delta_j, 0.0);
        assert_eq!(out[0].linear_term, 0.0);
    }

    #[test]
    fn random_directions_never_decrease_the_lagrangian_cost() {
        let s = settings(10_000, 43);
        let (v, sig, phi) = prepared(&testkit::scalar_weighted_start(500), &s);
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        let noise = generate_noise(s.seed, s.mc_paths, v.grid());
        let dirs = perturbation_directions(&v, 20, 2024);
        let outs =
            perturbation_optimality_check(&m, &sig, &phi, &v, &noise, &dirs, 0.05).unwrap();
        assert_eq!(outs.len(), 20);
        for (d, o) in outs.iter().enumerate() {
            assert!(
                o.delta_j >= -4.0 * o.se,
                "direction {d}: delta {} with se {}",
                o.delta_j,
                o.se
            );
        }
    }

    #[test]
    fn perturbations_cannot_improve_any_benchmark() {
        let s = settings(2000, 45);
        for (name, p) in testkit::solvable_benchmarks(300) {
            let (v, sig, phi) = prepared(&p, &s);
            let m = solve_multiplier(&sig, &phi, &v).unwrap();
            let noise = generate_noise(s.seed, s.mc_paths, v.grid());
            let dirs = perturbation_directions(&v, 20, 777);
            let outs =
                perturbation_optimality_check(&m, &sig, &phi, &v, &noise, &dirs, 0.05).unwrap();
            for (d, o) in outs.iter().enumerate() {
                assert!(
                    o.delta_j >= -4.0 * o.se,
                    "{name}, direction {d}: delta {} se {}",
                    o.delta_j,
                    o.se
                );
            }
        }
    }

    #[test]
    fn terminal_state_is_met_bit_exactly() {
        let s = settings(64, 47);
        for (name, p) in testkit::solvable_benchmarks(300) {
            let (v, sig, phi) = prepared(&p, &s);
            let m = solve_multiplier(&sig, &phi, &v).unwrap();
            let noise = generate_noise(s.seed, s.mc_paths, v.grid());
            let ens = simulate_optimal(&m, &sig, &phi, &v, &noise).unwrap();
            for pi in 0..ens.num_paths() {
                let mut w = 0.0;
                for dw in noise.increments(pi) {
                    w += dw;
                }
                let eta = &v.problem().target.c0 + &v.problem().target.c1 * w;
                assert_eq!(ens.x[pi][300], eta, "{name}: terminal state differs on path {pi}");
            }
        }
    }

    #[test]
    fn manifold_is_met_when_the_equation_is_consistent() {
        let s = settings(64, 53);
        for (name, p) in testkit::solvable_benchmarks(300) {
            let (v, sig, phi) = prepared(&p, &s);
            let m = solve_multiplier(&sig, &phi, &v).unwrap();
            let noise = generate_noise(s.seed, s.mc_paths, v.grid());
            let ens = simulate_optimal(&m, &sig, &phi, &v, &noise).unwrap();
            for pi in 0..ens.num_paths() {
                let err =
                    (&v.problem().manifold.f * &ens.x[pi][0] - &v.problem().manifold.b).norm();
                assert!(err <= 1e-10, "{name}: manifold error {err}");
            }
        }
    }

    #[test]
    fn range_identity_for_symmetric_psd_factors() {
        // For any F and PSD S, F S w lies in the range of F S F^T: the
        // least-squares solve is always consistent.
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(59);
        for trial in 0..100 {
            let n = rng.random_range(1..=4);
            let k = rng.random_range(1..=n);
            let r = rng.random_range(0..=n);
            let f = nalgebra::DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
            let c = nalgebra::DMatrix::from_fn(n, r.max(1), |_, _| {
                if r == 0 {
                    0.0
                } else {
                    rng.random_range(-1.0..1.0)
                }
            });
            let s = &c * c.transpose();
            let w = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let rhs = &f * (&s * w);
            let fsf = linalg::symmetrize(&(&f * &s * f.transpose()));
            let (_, residual) = linalg::pinv_solve_sym(&fsf, &rhs);
            assert!(
                residual <= 1e-8 * (1.0 + rhs.norm()),
                "trial {trial}: residual {residual}"
            );
        }
    }

    #[test]
    fn time_varying_actuation_closed_form() {
        // L switches off halfway: L = 1 on [0, 1/2), 0 afterwards. Then
        // Sigma(s) = max(1/2 - s, 0), the multiplier is
        // (c0 - b) / Sigma(0) = 1.4, the drift control runs at 1.4 while
        // actuated, the state ramps 0.3 -> 1 on the first half and holds,
        // and the cost is (c0 - b)^2 / (1/2) = 0.98.
        let steps = 2000;
        let mut p = testkit::scalar_min_energy(steps);
        let l_values: Vec<_> = (0..=steps)
            .map(|i| {
                if (i as f64) < steps as f64 / 2.0 {
                    dmatrix![1.0]
                } else {
                    dmatrix![0.0]
                }
            })
            .collect();
        p.l = crate::grid::CoeffPath::from_nodes(l_values).unwrap();

        let s = settings(20, 63);
        let (v, sig, phi) = prepared(&p, &s);
        for i in 0..=steps {
            let t = v.grid().node(i);
            let exact = (0.5 - t).max(0.0);
            assert_abs_diff_eq!(sig.sigma(i)[(0, 0)], exact, epsilon = 1e-10);
        }
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        assert_abs_diff_eq!(m.lambda_star[0], 1.4, epsilon = 1e-9);

        let noise = generate_noise(s.seed, s.mc_paths, v.grid());
        let ens = simulate_optimal(&m, &sig, &phi, &v, &noise).unwrap();
        let quarter = steps / 4;
        for pi in 0..ens.num_paths() {
            assert_abs_diff_eq!(ens.v[pi][quarter][0], 1.4, epsilon = 1e-9);
            assert_abs_diff_eq!(ens.v[pi][3 * quarter][0], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ens.x[pi][0][0], 0.3, epsilon = 1e-9);
            assert_abs_diff_eq!(ens.x[pi][2 * quarter][0], 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(ens.x[pi][3 * quarter][0], 1.0, epsilon = 1e-9);
        }
        let cost = evaluate_cost(&ens, &v, None);
        assert_abs_diff_eq!(cost.j_hat, 0.98, epsilon = 1e-3);
        let dev = forward_consistency_check(&ens, &v, &noise).unwrap();
        assert!(dev <= 1e-9, "forward deviation {dev}");
    }

    #[test]
    fn streaming_pipeline_matches_the_materialized_operations() {
        // The pipeline folds cost and checks per path without storing
        // trajectories; its numbers must agree with the composed operations
        // on a materialized ensemble.
        let s = settings(500, 71);
        let p = testkit::scalar_with_feedback(400);
        let v = validate_problem(&p, &s).unwrap();
        let sol = solve_pipeline(&v).unwrap();

        let sig = solve_sigma(&v).unwrap();
        let phi = solve_target_odes(&sig, &v.problem().target, &v).unwrap();
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        let noise = generate_noise(s.seed, s.mc_paths, v.grid());
        let ens = simulate_optimal(&m, &sig, &phi, &v, &noise).unwrap();
        let cost = evaluate_cost(&ens, &v, Some(&m.lambda_star));
        let fwd = forward_consistency_check(&ens, &v, &noise).unwrap();
        let (r1, r2) = stationarity_check(&ens, &m, &v);

        assert_abs_diff_eq!(sol.cost.j_hat, cost.j_hat, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.cost.se, cost.se, epsilon = 1e-12);
        assert_abs_diff_eq!(
            sol.cost.lagrangian_j_hat.unwrap(),
            cost.lagrangian_j_hat.unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(sol.cost.breakdown.drift, cost.breakdown.drift, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.checks.forward_consistency, fwd, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.checks.stationarity_r1, r1, epsilon = 1e-13);
        assert_abs_diff_eq!(sol.checks.stationarity_r2, r2, epsilon = 1e-13);
        assert_eq!(sol.checks.terminal_error, 0.0);
    }

    #[test]
    fn pipeline_reports_consistent_checks() {
        let p = testkit::scalar_min_energy(2000);
        let v = validate_problem(&p, &settings(100, 5)).unwrap();
        let sol = solve_pipeline(&v).unwrap();
        assert_abs_diff_eq!(sol.multiplier.lambda_star[0], 0.7, epsilon = 1e-10);
        assert!(sol.checks.terminal_error == 0.0);
        assert!(sol.checks.manifold_error <= 1e-10);
        assert!(sol.checks.forward_consistency <= 1e-12);
        assert!(sol.checks.stationarity_r1 <= 1e-14);
        assert!(sol.checks.stationarity_r2 <= 1e-10);
        assert_abs_diff_eq!(sol.cost.j_hat, 0.49, epsilon = 1e-4);
    }

    #[test]
    fn ensembles_can_be_rebuilt_from_trajectories() {
        let grid = crate::grid::TimeGrid::new(0.0, 1.0, 4).unwrap();
        let path = vec![dvector![0.0]; 5];
        let ens = OptimalEnsemble::from_trajectories(
            grid,
            0,
            dvector![0.0],
            vec![path.clone()],
            vec![path.clone()],
            vec![path.clone()],
            vec![path.clone()],
        )
        .unwrap();
        assert_eq!(ens.num_paths(), 1);
        let bad = OptimalEnsemble::from_trajectories(
            grid,
            0,
            dvector![0.0],
            vec![path.clone()],
            vec![path.clone()],
            vec![vec![dvector![0.0]; 3]],
            vec![path],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn multiplier_example_matrix_shapes() {
        let s = settings(8, 61);
        let (v, sig, phi) = prepared(&testkit::planar_partial_pin(200), &s);
        let m = solve_multiplier(&sig, &phi, &v).unwrap();
        assert_eq!(m.s_matrix.shape(), (1, 1));
        assert_eq!(m.rhs.len(), 1);
        assert!(linalg::max_asymmetry(&m.s_matrix) <= 1e-10);
        assert!(linalg::min_eigenvalue(&m.s_matrix) >= -1e-10);
        let _ = dmatrix![0.0];
    }
}

