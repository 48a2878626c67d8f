//! Uniform time grid and node-indexed coefficient paths.
//!
//! Every quantity in the crate lives on the same uniform grid over the
//! control interval. Coefficients are piecewise constant: the value stored at
//! node `i` holds on `[s_i, s_{i+1})`, which gives bounded measurable
//! coefficients a concrete, bit-reproducible representation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Uniform partition of the control interval `[t_start, t_end]` into `steps`
/// subintervals. Nodes are `s_i = t_start + i * step()` for `i = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::BadGrid("endpoints must be finite".into()));
        }
        if t_start >= t_end {
            return Err(Error::BadGrid(format!(
                "t_start {t_start} must be strictly below t_end {t_end}"
            )));
        }
        if steps < 2 {
            return Err(Error::BadGrid(format!("need at least 2 steps, got {steps}")));
        }
        Ok(Self { t_start, t_end, steps })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of grid nodes, `steps + 1`.
    pub fn num_nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    /// Node `s_i`, computed directly from the index so that nodes never drift
    /// from accumulated additions.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.steps);
        if i == self.steps {
            self.t_end
        } else {
            self.t_start + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.num_nodes()).map(|i| self.node(i))
    }

    /// Index of a time that must coincide with a grid node (to a relative
    /// tolerance of a few ulps of the horizon).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let h = self.step();
        let rel = (t - self.t_start) / h;
        let i = rel.round();
        let tol = 1e-12 * self.t_end.abs().max(1.0) / h;
        if i < 0.0 || i > self.steps as f64 || (rel - i).abs() > tol.max(1e-9) {
            return Err(Error::BadGrid(format!("time {t} is not a grid node")));
        }
        Ok(i as usize)
    }

    /// Grid with the same span and `self.steps / factor` steps. Fails unless
    /// `factor` divides the step count.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(Error::BadGrid(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.steps
            )));
        }
        TimeGrid::new(self.t_start, self.t_end, self.steps / factor)
    }
}

/// A matrix-valued coefficient sampled at every grid node.
///
/// All matrices share one shape and contain only finite entries; both are
/// enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffPath {
    values: Vec<DMatrix<f64>>,
}

impl CoeffPath {
    /// A coefficient that holds the same value at every node.
    pub fn constant(value: DMatrix<f64>, grid: &TimeGrid) -> Result<Self> {
        Self::from_nodes(vec![value; grid.num_nodes()])
    }

    pub fn from_nodes(values: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = values
            .first()
            .ok_or_else(|| Error::DimensionMismatch("coefficient path is empty".into()))?;
        let shape = first.shape();
        for (i, v) in values.iter().enumerate() {
            if v.shape() != shape {
                return Err(Error::DimensionMismatch(format!(
                    "coefficient at node {i} has shape {:?}, expected {:?}",
                    v.shape(),
                    shape
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("coefficient at node {i}")));
            }
        }
        Ok(Self { values })
    }

    pub fn at(&self, node: usize) -> &DMatrix<f64> {
        &self.values[node]
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    pub fn rows(&self) -> usize {
        self.values[0].nrows()
    }

    pub fn cols(&self) -> usize {
        self.values[0].ncols()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.values.iter()
    }

    /// Checks that the path has one value per node of `grid`.
    pub fn check_grid(&self, grid: &TimeGrid, name: &str) -> Result<()> {
        if self.num_nodes() != grid.num_nodes() {
            return Err(Error::DimensionMismatch(format!(
                "{name}: {} values for a grid with {} nodes",
                self.num_nodes(),
                grid.num_nodes()
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Result<Self> {
        Self::from_nodes(self.values.iter().map(f).collect())
    }
}
