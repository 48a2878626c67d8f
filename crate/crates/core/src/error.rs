//! Error type shared by every module of the crate.

/// Errors surfaced by validation, transforms, integrators and solvers.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// Incompatible matrix/vector shapes or path lengths.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A weight matrix violates its positivity requirement.
    #[error("matrix not positive semidefinite: {0}")]
    NotPositive(String),

    /// Degenerate or inconsistent time grid.
    #[error("bad time grid: {0}")]
    BadGrid(String),

    /// A matrix that must be inverted is numerically singular.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// An integrator or factorization broke down.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A simulated state overflowed or produced NaN.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The algebraic multiplier equation is inconsistent: no initial state on
    /// the manifold can be steered to the requested target.
    #[error(
        "target unreachable from manifold: least-squares residual {residual:.6e} \
         exceeds tolerance {tolerance:.6e}"
    )]
    TargetUnreachableFromManifold { residual: f64, tolerance: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
