//! Reduction of a raw controlled system to canonical form.
//!
//! A raw system `dx = (A x + B u) ds + (C x + D u) dW` whose diffusion
//! loading satisfies the nondegeneracy condition `D D^T >= delta I` admits a
//! bounded invertible `M` with `D M = (I, 0)`. Splitting `B M = (K, L)` and
//! setting `Abar = A - K C` produces the canonical system
//!
//! ```text
//! dxbar = (Abar xbar + K z + L v) ds + z dW
//! ```
//!
//! whose reachable sets coincide with the raw system's: the control
//! `u = M (z - C xbar, v)` drives the raw state along the canonical
//! trajectory. Cost weights are not transformed; canonical weights are
//! direct inputs of the problem model.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{CoeffPath, TimeGrid};
use crate::linalg;
use crate::mc::PathEnsemble;

/// Raw system coefficients under the nondegeneracy condition.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSystem {
    pub grid: TimeGrid,
    pub a: CoeffPath,
    pub c: CoeffPath,
    pub b: CoeffPath,
    pub d: CoeffPath,
    /// Required uniform lower bound on the eigenvalues of `D D^T`.
    pub delta_d: f64,
}

impl RawSystem {
    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.cols()
    }

    /// Shape and nondegeneracy gate.
    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.control_dim();
        for (path, name, rows, cols) in [
            (&self.a, "A", n, n),
            (&self.c, "C", n, n),
            (&self.b, "B", n, m),
            (&self.d, "D", n, m),
        ] {
            path.check_grid(&self.grid, name)?;
            if path.rows() != rows || path.cols() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    path.rows(),
                    path.cols()
                )));
            }
        }
        if !(self.delta_d.is_finite() && self.delta_d > 0.0) {
            return Err(Error::NotPositive("delta_d must be strictly positive".into()));
        }
        let margin = check_nondegeneracy(&self.d)?;
        if margin < self.delta_d {
            return Err(Error::NotPositive(format!(
                "nondegeneracy margin {margin:.6e} below delta_d {:.6e}",
                self.delta_d
            )));
        }
        Ok(())
    }
}

/// Result of the canonical reduction: the per-node transform `M`, the
/// canonical coefficients, and a per-node condition estimate of `M`.
#[derive(Debug, Clone)]
pub struct TransformResult {
    pub m: CoeffPath,
    pub abar: CoeffPath,
    pub k: CoeffPath,
    pub l: CoeffPath,
    pub cond_m: Vec<f64>,
}

/// Smallest eigenvalue of `D(s) D(s)^T` over the nodes. The caller compares
/// the margin against its nondegeneracy bound.
pub fn check_nondegeneracy(d: &CoeffPath) -> Result<f64> {
    let n = d.rows();
    let m = d.cols();
    if m <= n {
        return Err(Error::DimensionMismatch(format!(
            "need more controls than states, got D of shape {n}x{m}"
        )));
    }
    let mut margin = f64::INFINITY;
    for dm in d.iter() {
        let ddt = linalg::symmetrize(&(dm * dm.transpose()));
        margin = margin.min(linalg::min_eigenvalue(&ddt));
    }
    Ok(margin)
}

/// Builds the per-node transform `M(s) = [D^T (D D^T)^{-1} | Z(s)]` where the
/// columns of `Z(s)` are an orthonormal basis of the kernel of `D(s)`.
///
/// The kernel basis is deterministic: candidates are the standard basis
/// vectors, picked greedily by largest residual after projection, and each
/// basis vector is oriented so that its first nonzero entry is positive.
pub fn build_m(d: &CoeffPath) -> Result<CoeffPath> {
    let n = d.rows();
    let m = d.cols();
    if m <= n {
        return Err(Error::DimensionMismatch(format!(
            "need more controls than states, got D of shape {n}x{m}"
        )));
    }
    let mut values = Vec::with_capacity(d.num_nodes());
    for (node, dm) in d.iter().enumerate() {
        let ddt = linalg::symmetrize(&(dm * dm.transpose()));
        let chol = ddt
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("D D^T at node {node}")))?;
        // Right inverse: D^T (D D^T)^{-1}, m x n.
        let right_inv = chol.solve(dm).transpose();
        let kernel = kernel_basis(dm, &right_inv)?;

        let mut mm = DMatrix::zeros(m, m);
        mm.view_mut((0, 0), (m, n)).copy_from(&right_inv);
        for (j, z) in kernel.iter().enumerate() {
            mm.view_mut((0, n + j), (m, 1)).copy_from(z);
        }
        values.push(mm);
    }
    CoeffPath::from_nodes(values)
}

/// Orthonormal kernel basis of `D` via projection of the standard basis onto
/// the orthogonal complement of the row space, with greedy pivoting.
fn kernel_basis(d: &DMatrix<f64>, right_inv: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    let n = d.nrows();
    let m = d.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(m - n);
    let mut used = vec![false; m];
    while basis.len() < m - n {
        let mut best: Option<(usize, DVector<f64>, f64)> = None;
        for j in 0..m {
            if used[j] {
                continue;
            }
            let mut w = DVector::zeros(m);
            w[j] = 1.0;
            project_out(&mut w, d, right_inv, &basis);
            // Re-orthogonalize once for stability.
            project_out(&mut w, d, right_inv, &basis);
            let norm = w.norm();
            if best.as_ref().is_none_or(|(_, _, bn)| norm > *bn) {
                best = Some((j, w, norm));
            }
        }
        let (j, w, norm) = best.expect("candidates left");
        if norm <= 1e-10 {
            return Err(Error::Singular(
                "kernel basis collapsed; D is too close to full width rank".into(),
            ));
        }
        used[j] = true;
        let mut z = w / norm;
        orient(&mut z);
        basis.push(z);
    }
    Ok(basis)
}

fn project_out(
    w: &mut DVector<f64>,
    d: &DMatrix<f64>,
    right_inv: &DMatrix<f64>,
    basis: &[DVector<f64>],
) {
    // Remove the row-space component D^T (D D^T)^{-1} D w.
    let dw = d * &*w;
    *w -= right_inv * dw;
    for z in basis {
        let c = z.dot(w);
        w.axpy(-c, z, 1.0);
    }
}

/// Flips the sign so the first entry of meaningful magnitude is positive.
fn orient(z: &mut DVector<f64>) {
    for x in z.iter() {
        if x.abs() > 1e-9 {
            if *x < 0.0 {
                *z *= -1.0;
            }
            return;
        }
    }
}

/// Full canonical reduction of a validated raw system.
pub fn to_canonical(raw: &RawSystem) -> Result<TransformResult> {
    raw.validate()?;
    let n = raw.state_dim();
    let m = raw.control_dim();
    let m_path = build_m(&raw.d)?;

    let mut abar = Vec::with_capacity(raw.grid.num_nodes());
    let mut k = Vec::with_capacity(raw.grid.num_nodes());
    let mut l = Vec::with_capacity(raw.grid.num_nodes());
    let mut cond_m = Vec::with_capacity(raw.grid.num_nodes());
    for i in 0..raw.grid.num_nodes() {
        let bm = raw.b.at(i) * m_path.at(i);
        let ki = bm.view((0, 0), (n, n)).into_owned();
        let li = bm.view((0, n), (n, m - n)).into_owned();
        abar.push(raw.a.at(i) - &ki * raw.c.at(i));
        k.push(ki);
        l.push(li);
        let cond = linalg::condition_estimate(m_path.at(i));
        if !cond.is_finite() {
            return Err(Error::Singular(format!("transform at node {i} is singular")));
        }
        cond_m.push(cond);
    }
    Ok(TransformResult {
        m: m_path,
        abar: CoeffPath::from_nodes(abar)?,
        k: CoeffPath::from_nodes(k)?,
        l: CoeffPath::from_nodes(l)?,
        cond_m,
    })
}

/// Maps canonical controls back to raw controls:
/// `u(s) = M(s) (z(s) - C(s) xbar(s), v(s))` per node and path.
pub fn lift_control(
    z: &PathEnsemble<DVector<f64>>,
    v: &PathEnsemble<DVector<f64>>,
    xbar: &PathEnsemble<DVector<f64>>,
    m: &CoeffPath,
    c: &CoeffPath,
) -> Result<PathEnsemble<DVector<f64>>> {
    let grid = *xbar.grid();
    let paths = xbar.num_paths();
    if z.num_paths() != paths || v.num_paths() != paths {
        return Err(Error::DimensionMismatch("path counts differ".into()));
    }
    if z.grid() != &grid || v.grid() != &grid {
        return Err(Error::DimensionMismatch("grids differ".into()));
    }
    m.check_grid(&grid, "M")?;
    c.check_grid(&grid, "C")?;
    let n = c.rows();
    let mm = m.rows();
    let mn = mm - n;

    let mut out = Vec::with_capacity(paths);
    for p in 0..paths {
        let mut nodes = Vec::with_capacity(grid.num_nodes());
        for i in 0..grid.num_nodes() {
            let zi = z.at(p, i);
            let vi = v.at(p, i);
            let xi = xbar.at(p, i);
            if zi.len() != n || vi.len() != mn || xi.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "control/state dimensions at node {i}"
                )));
            }
            let mut stacked = DVector::zeros(mm);
            stacked.rows_mut(0, n).copy_from(&(zi - c.at(i) * xi));
            stacked.rows_mut(n, mn).copy_from(vi);
            nodes.push(m.at(i) * stacked);
        }
        out.push(nodes);
    }
    PathEnsemble::from_paths(grid, out)
}
