//! Solver library for stochastic linear-quadratic optimal control with a
//! fixed terminal state and an initial state confined to a linear manifold.
//!
//! The pipeline works on the canonical system
//!
//! ```text
//! dx = [A x + K z + L v] ds + z dW,      x(T) = c0 + c1 W(T),
//! ```
//!
//! minimising `E{<G x(t), x(t)> + int <Q x, x> + <R z, z> + <N v, v> ds}`
//! over controls whose initial state satisfies `F x(t) = b`:
//!
//! 1. [`canonical`] reduces a raw system with nondegenerate control loading
//!    to canonical form and maps controls back.
//! 2. [`riccati`] integrates the Riccati equation for `Sigma` backward from
//!    `Sigma(T) = 0` and the two matrix ODEs for the affine backward pair.
//! 3. [`solver`] solves the algebraic equation for the multiplier, simulates
//!    the forward adjoint and recovers the optimal trajectories by the
//!    decoupling relations.
//! 4. [`controllability`] decides reachability deterministically against
//!    `Sigma(t)`, whose role as the hat-system controllability Gramian is
//!    cross-checked by Monte Carlo in [`mc`] and [`verify`].
//!
//! Everything is deterministic in `(inputs, seed)`, including across worker
//! counts.

pub mod canonical;
pub mod controllability;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod mc;
pub mod problem;
pub mod riccati;
pub mod solver;
pub mod testkit;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{CoeffPath, TimeGrid};
pub use problem::{
    validate_problem, AffineTarget, CanonicalProblem, Manifold, SolverSettings, ValidatedProblem,
    Weights,
};
