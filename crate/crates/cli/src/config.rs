//! JSON configuration model and its mapping onto the solver types.
//!
//! Matrices are row-major nested arrays. Time-dependent coefficients accept
//! either a single constant matrix or a list of per-node matrices of length
//! `steps + 1`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use stoclq::canonical::RawSystem;
use stoclq::{
    AffineTarget, CanonicalProblem, CoeffPath, Manifold, SolverSettings, TimeGrid, Weights,
};

#[derive(Debug, Deserialize)]
pub struct ConfigFile {
    #[serde(default)]
    pub problem: Option<ProblemConfig>,
    #[serde(default)]
    pub raw_system: Option<RawSystemConfig>,
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
    #[serde(default)]
    pub settings: SettingsConfig,
}

#[derive(Debug, Deserialize)]
pub struct GridConfig {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

/// A constant matrix, or one matrix per grid node.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Constant(Vec<Vec<f64>>),
    PerNode(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Deserialize)]
pub struct ProblemConfig {
    pub grid: GridConfig,
    pub coefficients: CoefficientsConfig,
    pub weights: WeightsConfig,
    pub manifold: ManifoldConfig,
    pub target: TargetConfig,
}

#[derive(Debug, Deserialize)]
pub struct CoefficientsConfig {
    pub a: MatrixSpec,
    pub k: MatrixSpec,
    pub l: MatrixSpec,
}

#[derive(Debug, Deserialize)]
pub struct WeightsConfig {
    pub g: Vec<Vec<f64>>,
    pub q: MatrixSpec,
    pub r: MatrixSpec,
    pub n: MatrixSpec,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    1e-9
}

#[derive(Debug, Deserialize)]
pub struct ManifoldConfig {
    pub f: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Deserialize)]
pub struct TargetConfig {
    pub c0: Vec<f64>,
    pub c1: Vec<f64>,
}

#[derive(Debug, Deserialize)]
pub struct RawSystemConfig {
    pub grid: GridConfig,
    pub a: MatrixSpec,
    pub c: MatrixSpec,
    pub b: MatrixSpec,
    pub d: MatrixSpec,
    pub delta_d: f64,
}

#[derive(Debug, Deserialize)]
pub struct TransferConfig {
    pub x0: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
pub struct SettingsConfig {
    pub mc_paths: Option<usize>,
    pub seed: Option<u64>,
    pub ode_substeps: Option<usize>,
    pub symmetry_tol: Option<f64>,
    pub psd_tol: Option<f64>,
    pub lsq_residual_tol: Option<f64>,
    pub mc_sigma_mult: Option<f64>,
    /// Perturbation step used by `verify`.
    pub eps: Option<f64>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Default, Clone, Copy)]
pub struct Overrides {
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub eps: Option<f64>,
}

/// Anything that goes wrong before the solver runs: unreadable file, schema
/// violation, inconsistent dimensions. Mapped to exit code 3.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn read_config(path: &Path) -> Result<ConfigFile, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| ConfigError(format!("config field `{}`: {}", e.path(), e.inner())))
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ConfigError> {
    if rows.is_empty() {
        return Err(ConfigError(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(ConfigError(format!("{what}: ragged or empty matrix rows")));
    }
    let mut m = DMatrix::zeros(rows.len(), ncols);
    for (i, row) in rows.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    Ok(m)
}

impl MatrixSpec {
    fn to_path(&self, grid: &TimeGrid, what: &str) -> Result<CoeffPath, ConfigError> {
        match self {
            MatrixSpec::Constant(rows) => {
                CoeffPath::constant(to_matrix(rows, what)?, grid)
                    .map_err(|e| ConfigError(format!("{what}: {e}")))
            }
            MatrixSpec::PerNode(list) => {
                if list.len() != grid.num_nodes() {
                    return Err(ConfigError(format!(
                        "{what}: {} matrices for a grid with {} nodes",
                        list.len(),
                        grid.num_nodes()
                    )));
                }
                let values = list
                    .iter()
                    .enumerate()
                    .map(|(i, rows)| to_matrix(rows, &format!("{what}[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?;
                CoeffPath::from_nodes(values).map_err(|e| ConfigError(format!("{what}: {e}")))
            }
        }
    }

    fn is_constant(&self) -> bool {
        matches!(self, MatrixSpec::Constant(_))
    }
}

fn build_grid(cfg: &GridConfig, steps_override: Option<usize>) -> Result<TimeGrid, ConfigError> {
    let steps = steps_override.unwrap_or(cfg.steps);
    TimeGrid::new(cfg.t_start, cfg.t_end, steps).map_err(|e| ConfigError(e.to_string()))
}

fn to_vector(v: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(v)
}

impl ConfigFile {
    pub fn settings(&self, ov: &Overrides) -> SolverSettings {
        let d = SolverSettings::default();
        SolverSettings {
            mc_paths: ov.paths.or(self.settings.mc_paths).unwrap_or(d.mc_paths),
            seed: ov.seed.or(self.settings.seed).unwrap_or(d.seed),
            ode_substeps: self.settings.ode_substeps.unwrap_or(d.ode_substeps),
            symmetry_tol: self.settings.symmetry_tol.unwrap_or(d.symmetry_tol),
            psd_tol: self.settings.psd_tol.unwrap_or(d.psd_tol),
            lsq_residual_tol: self.settings.lsq_residual_tol.unwrap_or(d.lsq_residual_tol),
            mc_sigma_mult: self.settings.mc_sigma_mult.unwrap_or(d.mc_sigma_mult),
        }
    }

    pub fn eps(&self, ov: &Overrides) -> f64 {
        ov.eps.or(self.settings.eps).unwrap_or(0.05)
    }

    pub fn problem(&self, ov: &Overrides) -> Result<CanonicalProblem, ConfigError> {
        let cfg = self
            .problem
            .as_ref()
            .ok_or_else(|| ConfigError("config has no `problem` section".into()))?;
        if ov.steps.is_some() {
            let all_constant = cfg.coefficients.a.is_constant()
                && cfg.coefficients.k.is_constant()
                && cfg.coefficients.l.is_constant()
                && cfg.weights.q.is_constant()
                && cfg.weights.r.is_constant()
                && cfg.weights.n.is_constant();
            if !all_constant {
                return Err(ConfigError(
                    "--steps can only override configs with constant coefficients".into(),
                ));
            }
        }
        let grid = build_grid(&cfg.grid, ov.steps)?;
        Ok(CanonicalProblem {
            grid,
            a: cfg.coefficients.a.to_path(&grid, "problem.coefficients.a")?,
            k: cfg.coefficients.k.to_path(&grid, "problem.coefficients.k")?,
            l: cfg.coefficients.l.to_path(&grid, "problem.coefficients.l")?,
            weights: Weights {
                g: to_matrix(&cfg.weights.g, "problem.weights.g")?,
                q: cfg.weights.q.to_path(&grid, "problem.weights.q")?,
                r: cfg.weights.r.to_path(&grid, "problem.weights.r")?,
                n: cfg.weights.n.to_path(&grid, "problem.weights.n")?,
                delta: cfg.weights.delta,
            },
            manifold: Manifold {
                f: to_matrix(&cfg.manifold.f, "problem.manifold.f")?,
                b: to_vector(&cfg.manifold.b),
            },
            target: AffineTarget {
                c0: to_vector(&cfg.target.c0),
                c1: to_vector(&cfg.target.c1),
            },
        })
    }

    /// The minimum-energy transfer configuration: zero running state and
    /// diffusion weights, identity drift weight, full pinning at `x0`.
    pub fn transfer_problem(&self, ov: &Overrides) -> Result<CanonicalProblem, ConfigError> {
        let x0 = self
            .transfer
            .as_ref()
            .ok_or_else(|| ConfigError("transfer requires a `transfer.x0` section".into()))?;
        let mut p = self.problem(ov)?;
        let n = p.state_dim();
        let mn = p.drift_control_dim();
        if x0.x0.len() != n {
            return Err(ConfigError(format!(
                "transfer.x0 has length {}, expected {n}",
                x0.x0.len()
            )));
        }
        let zero_n = DMatrix::zeros(n, n);
        p.weights = Weights {
            g: zero_n.clone(),
            q: CoeffPath::constant(zero_n.clone(), &p.grid)
                .map_err(|e| ConfigError(e.to_string()))?,
            r: CoeffPath::constant(zero_n, &p.grid).map_err(|e| ConfigError(e.to_string()))?,
            n: CoeffPath::constant(DMatrix::identity(mn, mn), &p.grid)
                .map_err(|e| ConfigError(e.to_string()))?,
            delta: 0.5,
        };
        p.manifold = Manifold { f: DMatrix::identity(n, n), b: to_vector(&x0.x0) };
        Ok(p)
    }

    pub fn raw_system(&self, ov: &Overrides) -> Result<RawSystem, ConfigError> {
        let cfg = self
            .raw_system
            .as_ref()
            .ok_or_else(|| ConfigError("config has no `raw_system` section".into()))?;
        let grid = build_grid(&cfg.grid, ov.steps)?;
        Ok(RawSystem {
            grid,
            a: cfg.a.to_path(&grid, "raw_system.a")?,
            c: cfg.c.to_path(&grid, "raw_system.c")?,
            b: cfg.b.to_path(&grid, "raw_system.b")?,
            d: cfg.d.to_path(&grid, "raw_system.d")?,
            delta_d: cfg.delta_d,
        })
    }
}
