//! Benchmark problems with closed-form solutions, shared by the unit,
//! property and acceptance test suites.
//!
//! Each constructor fixes everything except the grid resolution. The closed
//! forms quoted in the doc comments are straightforward hand calculations
//! from the defining equations and are frozen as oracle values in the tests.

use nalgebra::{dmatrix, dvector, DMatrix, DVector};

use crate::canonical::RawSystem;
use crate::grid::{CoeffPath, TimeGrid};
use crate::problem::{AffineTarget, CanonicalProblem, Manifold, Weights};

fn unit_interval(steps: usize) -> TimeGrid {
    TimeGrid::new(0.0, 1.0, steps).expect("benchmark grid")
}

fn scalar_problem(
    steps: usize,
    a: f64,
    k: f64,
    g: f64,
    b: f64,
    c0: f64,
    c1: f64,
) -> CanonicalProblem {
    let grid = unit_interval(steps);
    let scalar = |v: f64| CoeffPath::constant(dmatrix![v], &grid).unwrap();
    CanonicalProblem {
        grid,
        a: scalar(a),
        k: scalar(k),
        l: scalar(1.0),
        weights: Weights {
            g: dmatrix![g],
            q: scalar(0.0),
            r: scalar(0.0),
            n: scalar(1.0),
            delta: 0.5,
        },
        manifold: Manifold { f: dmatrix![1.0], b: dvector![b] },
        target: AffineTarget { c0: dvector![c0], c1: dvector![c1] },
    }
}

/// Scalar minimum-energy transfer from the line `x(0) = 0.3` to `x(1) = 1`.
///
/// Closed forms: `Sigma(s) = 1 - s`, offset `a(s) = -1`, multiplier `0.7`,
/// optimal drift control `v = 0.7`, state `x(s) = 1 - 0.7 (1 - s)`, cost
/// `0.49`.
pub fn scalar_min_energy(steps: usize) -> CanonicalProblem {
    scalar_problem(steps, 0.0, 0.0, 0.0, 0.3, 1.0, 0.0)
}

/// Scalar problem with diffusion feedback `K = 1`, same pinning as
/// [`scalar_min_energy`]. Closed form: `Sigma(s) = e^{1-s} - 1`.
pub fn scalar_with_feedback(steps: usize) -> CanonicalProblem {
    scalar_problem(steps, 0.0, 1.0, 0.0, 0.3, 1.0, 0.0)
}

/// Scalar problem whose target is the Brownian endpoint itself
/// (`c0 = 0`, `c1 = 1`, manifold `x(0) = 0`). The optimal state is `W(s)`
/// with zero drift control and zero cost.
pub fn scalar_noise_target(steps: usize) -> CanonicalProblem {
    scalar_problem(steps, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0)
}

/// [`scalar_min_energy`] with an initial-state weight `G = 1`. The optimal
/// trajectory is unchanged (the manifold pins `x(0)` completely) while the
/// multiplier drops to `0.4`.
pub fn scalar_weighted_start(steps: usize) -> CanonicalProblem {
    scalar_problem(steps, 0.0, 0.0, 1.0, 0.3, 1.0, 0.0)
}

/// Planar problem with full drift actuation (`L = I`) and a one-row manifold
/// pinning only the first component: `x_1(0) = 0`, target `(1, 1)`.
///
/// Closed forms: `Sigma(s) = (1-s) I`, multiplier `1`, adjoint
/// `y = (1, 0)`, state `x(s) = (s, 1)`, cost `1`.
pub fn planar_partial_pin(steps: usize) -> CanonicalProblem {
    let grid = unit_interval(steps);
    let cpath = |m: DMatrix<f64>| CoeffPath::constant(m, &grid).unwrap();
    CanonicalProblem {
        grid,
        a: cpath(DMatrix::zeros(2, 2)),
        k: cpath(DMatrix::zeros(2, 2)),
        l: cpath(DMatrix::identity(2, 2)),
        weights: Weights {
            g: DMatrix::zeros(2, 2),
            q: cpath(DMatrix::zeros(2, 2)),
            r: cpath(DMatrix::zeros(2, 2)),
            n: cpath(DMatrix::identity(2, 2)),
            delta: 0.5,
        },
        manifold: Manifold { f: dmatrix![1.0, 0.0], b: dvector![0.0] },
        target: AffineTarget { c0: dvector![1.0, 1.0], c1: dvector![0.0, 0.0] },
    }
}

/// Planar problem that only actuates the first component (`L = (1, 0)^T`),
/// fully pinned at the origin with target `(1, 1)`.
///
/// `Sigma(s) = diag(1-s, 0)` is rank deficient: the second target component
/// is unreachable and the multiplier equation is inconsistent.
pub fn planar_rank_deficient(steps: usize) -> CanonicalProblem {
    let grid = unit_interval(steps);
    let cpath = |m: DMatrix<f64>| CoeffPath::constant(m, &grid).unwrap();
    CanonicalProblem {
        grid,
        a: cpath(DMatrix::zeros(2, 2)),
        k: cpath(DMatrix::zeros(2, 2)),
        l: cpath(dmatrix![1.0; 0.0]),
        weights: Weights {
            g: DMatrix::zeros(2, 2),
            q: cpath(DMatrix::zeros(2, 2)),
            r: cpath(DMatrix::zeros(2, 2)),
            n: cpath(dmatrix![1.0]),
            delta: 0.5,
        },
        manifold: Manifold { f: DMatrix::identity(2, 2), b: dvector![0.0, 0.0] },
        target: AffineTarget { c0: dvector![1.0, 1.0], c1: dvector![0.0, 0.0] },
    }
}

/// Scalar raw system with `B = (1, 0)`, `D = (1, 1)` and mild state feedback,
/// used by the canonical-transform round trips. The transform yields
/// `K = 0.5`, `L = 1/sqrt(2)` and `Abar = a - 0.5 c`.
pub fn raw_scalar_pair(steps: usize) -> RawSystem {
    let grid = unit_interval(steps);
    RawSystem {
        grid,
        a: CoeffPath::constant(dmatrix![0.3], &grid).unwrap(),
        c: CoeffPath::constant(dmatrix![0.4], &grid).unwrap(),
        b: CoeffPath::constant(dmatrix![1.0, 0.0], &grid).unwrap(),
        d: CoeffPath::constant(dmatrix![1.0, 1.0], &grid).unwrap(),
        delta_d: 0.5,
    }
}

/// All solvable benchmark problems, for suite-wide invariant sweeps.
pub fn solvable_benchmarks(steps: usize) -> Vec<(&'static str, CanonicalProblem)> {
    vec![
        ("scalar_min_energy", scalar_min_energy(steps)),
        ("scalar_with_feedback", scalar_with_feedback(steps)),
        ("scalar_noise_target", scalar_noise_target(steps)),
        ("scalar_weighted_start", scalar_weighted_start(steps)),
        ("planar_partial_pin", planar_partial_pin(steps)),
    ]
}

/// All benchmarks, including the unreachable rank-deficient configuration.
pub fn all_benchmarks(steps: usize) -> Vec<(&'static str, CanonicalProblem)> {
    let mut v = solvable_benchmarks(steps);
    v.push(("planar_rank_deficient", planar_rank_deficient(steps)));
    v
}

/// Target vector realized at the terminal time for a given Brownian endpoint.
pub fn realized_target(target: &AffineTarget, w_end: f64) -> DVector<f64> {
    &target.c0 + &target.c1 * w_end
}

/// Euler round trip for the canonical transform: simulate the canonical
/// state with constant controls `(z, v)`, lift the control, resimulate the
/// raw system on the `coarse_factor`-times finer master grid with the lifted
/// control frozen on each coarse cell, and return the mean over paths of the
/// largest deviation at shared nodes.
///
/// Because the raw leg runs on the refined grid, the deviation measures the
/// strong discretization error of the coarse step and shrinks as the coarse
/// grid is refined under common (nested) noise.
#[allow(clippy::needless_range_loop)]
pub fn round_trip_deviation(
    raw: &crate::canonical::RawSystem,
    master: &crate::mc::NoiseEnsemble,
    coarse_factor: usize,
    z_level: f64,
    v_levels: &DVector<f64>,
    x0: &DVector<f64>,
) -> crate::error::Result<f64> {
    use crate::canonical::{lift_control, to_canonical};
    use crate::mc::{euler_linear_sde, PathEnsemble};

    let tr = to_canonical(raw)?;
    let coarse = master.coarsened(coarse_factor)?;
    let n = raw.state_dim();
    let cg = *coarse.grid();

    let subsample = |path: &CoeffPath| -> CoeffPath {
        CoeffPath::from_nodes(
            (0..cg.num_nodes()).map(|i| path.at(i * coarse_factor).clone()).collect(),
        )
        .expect("subsampled coefficient path")
    };
    let abar_c = subsample(&tr.abar);
    let k_c = subsample(&tr.k);
    let l_c = subsample(&tr.l);
    let m_c = subsample(&tr.m);
    let c_c = subsample(&raw.c);

    let z_const = DVector::from_element(n, z_level);
    let xbar = euler_linear_sde(
        &coarse,
        |_| x0.clone(),
        |i, x: &DVector<f64>| abar_c.at(i) * x + k_c.at(i) * &z_const + l_c.at(i) * v_levels,
        |_, _: &DVector<f64>| z_const.clone(),
    )?;
    let constant_like = |value: &DVector<f64>| -> PathEnsemble<DVector<f64>> {
        let paths = (0..coarse.num_paths())
            .map(|_| vec![value.clone(); cg.num_nodes()])
            .collect();
        PathEnsemble::from_paths(cg, paths).expect("constant control paths")
    };
    let u = lift_control(&constant_like(&z_const), &constant_like(v_levels), &xbar, &m_c, &c_c)?;

    let h_fine = master.grid().step();
    let mut devs = Vec::new();
    for p in 0..master.num_paths() {
        let dw = master.increments(p);
        let mut x = x0.clone();
        let mut worst = 0.0f64;
        for i in 0..master.grid().steps() {
            let ui = u.at(p, i / coarse_factor);
            let drift = raw.a.at(i) * &x + raw.b.at(i) * ui;
            let diff = raw.c.at(i) * &x + raw.d.at(i) * ui;
            x += drift * h_fine + diff * dw[i];
            if (i + 1) % coarse_factor == 0 {
                worst = worst.max((&x - xbar.at(p, (i + 1) / coarse_factor)).amax());
            }
        }
        devs.push(worst);
    }
    Ok(crate::linalg::pairwise_sum_f64(&devs) / devs.len() as f64)
}
