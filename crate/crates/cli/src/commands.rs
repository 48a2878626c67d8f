//! Subcommand implementations: each builds a deterministic report, prints it
//! to stdout, and optionally writes artifacts under `--out`.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use stoclq::controllability::{hat_coefficients, manifold_reachability_solve};
use stoclq::mc::{estimate_gramian, generate_noise};
use stoclq::riccati::{solve_sigma, solve_target_odes, PhiCoeffs, SigmaPath};
use stoclq::solver::{solve_pipeline, Solution};
use stoclq::verify::run_verification;
use stoclq::{validate_problem, CanonicalProblem, SolverSettings, ValidatedProblem};

use crate::config::{ConfigError, ConfigFile, Overrides};
use crate::jsonout::{format_float, Json};

/// Failure with the phase that produced it, deciding the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Unreadable, unparseable or invalid configuration: exit 3.
    Config(String),
    /// Solver-reported error: exit 2 for unreachable targets, 4 otherwise.
    Run(stoclq::Error),
    /// Filesystem trouble while writing outputs: exit 4.
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 3,
            Failure::Run(stoclq::Error::TargetUnreachableFromManifold { .. }) => 2,
            Failure::Run(_) => 4,
            Failure::Io(_) => 4,
        }
    }

    pub fn message(&self) -> String {
        match self {
            Failure::Config(m) => m.clone(),
            Failure::Run(e) => e.to_string(),
            Failure::Io(m) => m.clone(),
        }
    }

    /// Machine-readable error report, still deterministic.
    pub fn report(&self, command: &str) -> Json {
        let mut fields = vec![
            ("command", Json::str(command)),
            ("error", Json::str(self.message())),
        ];
        if let Failure::Run(stoclq::Error::TargetUnreachableFromManifold {
            residual,
            tolerance,
        }) = self
        {
            fields.push(("residual", Json::Num(*residual)));
            fields.push(("tolerance", Json::Num(*tolerance)));
        }
        Json::obj(fields)
    }
}

pub struct Outputs<'a> {
    pub out_dir: Option<&'a Path>,
    pub dump_riccati: bool,
    pub dump_trajectories: bool,
}

fn settings_json(s: &SolverSettings) -> Json {
    Json::obj(vec![
        ("mc_paths", Json::UInt(s.mc_paths as u64)),
        ("seed", Json::UInt(s.seed)),
        ("ode_substeps", Json::UInt(s.ode_substeps as u64)),
        ("symmetry_tol", Json::Num(s.symmetry_tol)),
        ("psd_tol", Json::Num(s.psd_tol)),
        ("lsq_residual_tol", Json::Num(s.lsq_residual_tol)),
        ("mc_sigma_mult", Json::Num(s.mc_sigma_mult)),
    ])
}

fn problem_json(p: &ValidatedProblem) -> Json {
    let grid = p.grid();
    Json::obj(vec![
        (
            "grid",
            Json::obj(vec![
                ("t_start", Json::Num(grid.t_start())),
                ("t_end", Json::Num(grid.t_end())),
                ("steps", Json::UInt(grid.steps() as u64)),
            ]),
        ),
        (
            "dims",
            Json::obj(vec![
                ("state", Json::UInt(p.state_dim() as u64)),
                ("control", Json::UInt(p.problem().control_dim() as u64)),
                ("manifold_rows", Json::UInt(p.problem().manifold_rows() as u64)),
            ]),
        ),
    ])
}

fn prepare(
    cfg: &ConfigFile,
    ov: &Overrides,
    transfer: bool,
) -> Result<ValidatedProblem, Failure> {
    let problem: CanonicalProblem =
        if transfer { cfg.transfer_problem(ov)? } else { cfg.problem(ov)? };
    let settings = cfg.settings(ov);
    // Validation failures are configuration problems: exit 3.
    validate_problem(&problem, &settings).map_err(|e| Failure::Config(e.to_string()))
}

fn write_file(dir: &Path, name: &str, bytes: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    let path: PathBuf = dir.join(name);
    std::fs::write(&path, bytes)
        .map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

/// Run metadata lives next to the report so the report itself stays
/// byte-identical across reruns.
fn write_meta(dir: &Path, command: &str) -> Result<(), Failure> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = Json::obj(vec![
        ("command", Json::str(command)),
        ("unix_time", Json::UInt(stamp)),
        ("version", Json::str(env!("CARGO_PKG_VERSION"))),
    ]);
    write_file(dir, "run_meta.json", &meta.render())
}

fn emit(report: &Json, command: &str, outputs: &Outputs<'_>) -> Result<(), Failure> {
    let rendered = report.render();
    print!("{rendered}");
    if let Some(dir) = outputs.out_dir {
        write_file(dir, "report.json", &rendered)?;
        write_meta(dir, command)?;
    }
    Ok(())
}

fn csv_row(out: &mut String, cells: &[String]) {
    out.push_str(&cells.join(","));
    out.push('\n');
}

fn dump_riccati(dir: &Path, p: &ValidatedProblem, sig: &SigmaPath, phi: &PhiCoeffs) -> Result<(), Failure> {
    let grid = p.grid();
    let n = p.state_dim();
    let mut sigma_csv = String::new();
    let mut header = vec!["step".to_string(), "time".to_string()];
    for i in 0..n {
        for j in 0..n {
            header.push(format!("sigma_{}_{}", i + 1, j + 1));
        }
    }
    csv_row(&mut sigma_csv, &header);
    for node in 0..grid.num_nodes() {
        let mut cells = vec![node.to_string(), format_float(grid.node(node))];
        let s = sig.sigma(node);
        for i in 0..n {
            for j in 0..n {
                cells.push(format_float(s[(i, j)]));
            }
        }
        csv_row(&mut sigma_csv, &cells);
    }
    write_file(dir, "sigma.csv", &sigma_csv)?;

    let mut phi_csv = String::new();
    let mut header = vec!["step".to_string(), "time".to_string()];
    for i in 0..n {
        header.push(format!("a_{}", i + 1));
    }
    for i in 0..n {
        header.push(format!("bc_{}", i + 1));
    }
    csv_row(&mut phi_csv, &header);
    for node in 0..grid.num_nodes() {
        let mut cells = vec![node.to_string(), format_float(grid.node(node))];
        for i in 0..n {
            cells.push(format_float(phi.offset(node)[i]));
        }
        for i in 0..n {
            cells.push(format_float(phi.loading(node)[i]));
        }
        csv_row(&mut phi_csv, &cells);
    }
    write_file(dir, "phi.csv", &phi_csv)
}

fn dump_trajectories(
    dir: &Path,
    p: &ValidatedProblem,
    ens: &stoclq::solver::OptimalEnsemble,
) -> Result<(), Failure> {
    let grid = p.grid();
    let quantities: [(&str, &Vec<Vec<DVector<f64>>>); 4] =
        [("x", &ens.x), ("z", &ens.z), ("v", &ens.v), ("y", &ens.y)];
    for (name, data) in quantities {
        let dim = data[0][0].len();
        let mut csv = String::new();
        let mut header = vec!["path".to_string(), "step".to_string(), "time".to_string()];
        for c in 0..dim {
            header.push(format!("{name}_{}", c + 1));
        }
        csv_row(&mut csv, &header);
        for (pi, path) in data.iter().enumerate() {
            for (node, value) in path.iter().enumerate() {
                let mut cells =
                    vec![pi.to_string(), node.to_string(), format_float(grid.node(node))];
                for c in 0..dim {
                    cells.push(format_float(value[c]));
                }
                csv_row(&mut csv, &cells);
            }
        }
        write_file(dir, &format!("{name}.csv"), &csv)?;
    }
    Ok(())
}

fn checks_json(sol: &Solution) -> Json {
    Json::obj(vec![
        ("forward_consistency", Json::Num(sol.checks.forward_consistency)),
        ("stationarity_r1", Json::Num(sol.checks.stationarity_r1)),
        ("stationarity_r2", Json::Num(sol.checks.stationarity_r2)),
        ("manifold_error", Json::Num(sol.checks.manifold_error)),
        ("terminal_error", Json::Num(sol.checks.terminal_error)),
    ])
}

fn solve_like(
    command: &str,
    cfg: &ConfigFile,
    ov: &Overrides,
    outputs: &Outputs<'_>,
    transfer: bool,
) -> Result<i32, Failure> {
    let v = prepare(cfg, ov, transfer)?;
    let sol = solve_pipeline(&v).map_err(Failure::Run)?;
    let cost = &sol.cost;
    let report = Json::obj(vec![
        ("command", Json::str(command)),
        ("problem", problem_json(&v)),
        ("settings", settings_json(v.settings())),
        ("lambda_star", Json::vector(&sol.multiplier.lambda_star)),
        ("residual", Json::Num(sol.multiplier.residual)),
        ("s_matrix", Json::matrix(&sol.multiplier.s_matrix)),
        ("multiplier_rhs", Json::vector(&sol.multiplier.rhs)),
        ("j_hat", Json::Num(cost.j_hat)),
        ("se", Json::Num(cost.se)),
        (
            "lagrangian_j_hat",
            Json::Num(cost.lagrangian_j_hat.unwrap_or(cost.j_hat)),
        ),
        (
            "cost_breakdown",
            Json::obj(vec![
                ("initial", Json::Num(cost.breakdown.initial)),
                ("state", Json::Num(cost.breakdown.state)),
                ("diffusion", Json::Num(cost.breakdown.diffusion)),
                ("drift", Json::Num(cost.breakdown.drift)),
            ]),
        ),
        ("checks", checks_json(&sol)),
    ]);
    emit(&report, command, outputs)?;
    if let Some(dir) = outputs.out_dir {
        if outputs.dump_riccati {
            dump_riccati(dir, &v, &sol.sigma, &sol.phi)?;
        }
        if outputs.dump_trajectories {
            // Trajectories are only materialized on request; the noise
            // regenerates bit-identically from the settings.
            let noise = stoclq::mc::generate_noise(
                v.settings().seed,
                v.settings().mc_paths,
                v.grid(),
            );
            let ens = stoclq::solver::simulate_optimal(
                &sol.multiplier,
                &sol.sigma,
                &sol.phi,
                &v,
                &noise,
            )
            .map_err(Failure::Run)?;
            dump_trajectories(dir, &v, &ens)?;
        }
    }
    Ok(0)
}

pub fn solve(cfg: &ConfigFile, ov: &Overrides, outputs: &Outputs<'_>) -> Result<i32, Failure> {
    solve_like("solve", cfg, ov, outputs, false)
}

/// Minimum-energy transfer: the same pipeline with zeroed running weights,
/// identity drift weight and full pinning at the configured start state.
pub fn transfer(cfg: &ConfigFile, ov: &Overrides, outputs: &Outputs<'_>) -> Result<i32, Failure> {
    solve_like("transfer", cfg, ov, outputs, true)
}

fn gramian_check_json(
    v: &ValidatedProblem,
    sig: &SigmaPath,
) -> Result<(Json, f64), Failure> {
    let hat = hat_coefficients(sig, v).map_err(Failure::Run)?;
    let grid = v.grid();
    let noise = generate_noise(v.settings().seed, v.settings().mc_paths, grid);
    let est = estimate_gramian(
        grid.t_start(),
        grid.t_end(),
        &hat.ahat,
        &hat.khat,
        &hat.lhat,
        &noise,
    )
    .map_err(Failure::Run)?;
    let sigma0 = sig.sigma(0);
    let floor = 0.5 * grid.step() * (1.0 + stoclq::linalg::max_abs(sigma0)) + 1e-12;
    let z = est.max_z_score(sigma0, floor);
    let json = Json::obj(vec![
        ("psi_hat", Json::matrix(&est.psi_hat)),
        ("se", Json::matrix(&est.se)),
        ("sigma", Json::matrix(sigma0)),
        ("max_z_score", Json::Num(z)),
        ("paths", Json::UInt(est.paths as u64)),
    ]);
    Ok((json, z))
}

pub fn reach(cfg: &ConfigFile, ov: &Overrides, outputs: &Outputs<'_>) -> Result<i32, Failure> {
    let v = prepare(cfg, ov, false)?;
    let sig = solve_sigma(&v).map_err(Failure::Run)?;
    let phi = solve_target_odes(&sig, &v.problem().target, &v).map_err(Failure::Run)?;
    let r = manifold_reachability_solve(
        &v.problem().manifold.f,
        &v.problem().manifold.b,
        &sig,
        &phi,
        &v,
        v.grid().t_start(),
    )
    .map_err(Failure::Run)?;
    let (gramian_check, _) = gramian_check_json(&v, &sig)?;
    let report = Json::obj(vec![
        ("command", Json::str("reach")),
        ("problem", problem_json(&v)),
        ("settings", settings_json(v.settings())),
        ("reachable", Json::Bool(r.reachable)),
        ("xi", Json::vector(&r.xi)),
        ("residual", Json::Num(r.residual)),
        ("margin", Json::Num(r.margin)),
        ("gramian_check", gramian_check),
    ]);
    emit(&report, "reach", outputs)?;
    Ok(if r.reachable { 0 } else { 2 })
}

pub fn gramian(cfg: &ConfigFile, ov: &Overrides, outputs: &Outputs<'_>) -> Result<i32, Failure> {
    let v = prepare(cfg, ov, false)?;
    let sig = solve_sigma(&v).map_err(Failure::Run)?;
    let (check, _) = gramian_check_json(&v, &sig)?;
    let report = Json::obj(vec![
        ("command", Json::str("gramian")),
        ("problem", problem_json(&v)),
        ("settings", settings_json(v.settings())),
        ("comparison", check),
    ]);
    emit(&report, "gramian", outputs)?;
    Ok(0)
}

pub fn transform(cfg: &ConfigFile, ov: &Overrides, outputs: &Outputs<'_>) -> Result<i32, Failure> {
    let raw = cfg.raw_system(ov)?;
    let margin =
        stoclq::canonical::check_nondegeneracy(&raw.d).map_err(|e| Failure::Config(e.to_string()))?;
    let tr = stoclq::canonical::to_canonical(&raw).map_err(Failure::Run)?;

    // Largest defect of D M = (I, 0) over the nodes.
    let n = raw.state_dim();
    let m = raw.control_dim();
    let mut dm_err = 0.0f64;
    for i in 0..raw.grid.num_nodes() {
        let dm = raw.d.at(i) * tr.m.at(i);
        let mut target = nalgebra::DMatrix::zeros(n, m);
        target
            .view_mut((0, 0), (n, n))
            .copy_from(&nalgebra::DMatrix::identity(n, n));
        dm_err = dm_err.max(stoclq::linalg::max_abs(&(dm - target)));
    }
    let cond_max = tr.cond_m.iter().fold(0.0f64, |a, &c| a.max(c));
    let report = Json::obj(vec![
        ("command", Json::str("transform")),
        ("nondegeneracy_margin", Json::Num(margin)),
        ("dm_error_max", Json::Num(dm_err)),
        ("cond_m_max", Json::Num(cond_max)),
        ("m_first_node", Json::matrix(tr.m.at(0))),
        ("abar_first_node", Json::matrix(tr.abar.at(0))),
        ("k_first_node", Json::matrix(tr.k.at(0))),
        ("l_first_node", Json::matrix(tr.l.at(0))),
    ]);
    emit(&report, "transform", outputs)?;

    if let Some(dir) = outputs.out_dir {
        for (name, path) in [("m", &tr.m), ("abar", &tr.abar), ("k", &tr.k), ("l", &tr.l)] {
            let mut csv = String::new();
            let mut header = vec!["step".to_string(), "time".to_string()];
            for i in 0..path.rows() {
                for j in 0..path.cols() {
                    header.push(format!("{name}_{}_{}", i + 1, j + 1));
                }
            }
            csv_row(&mut csv, &header);
            for node in 0..raw.grid.num_nodes() {
                let mut cells = vec![node.to_string(), format_float(raw.grid.node(node))];
                let v = path.at(node);
                for i in 0..path.rows() {
                    for j in 0..path.cols() {
                        cells.push(format_float(v[(i, j)]));
                    }
                }
                csv_row(&mut csv, &cells);
            }
            write_file(dir, &format!("{name}.csv"), &csv)?;
        }
    }
    Ok(0)
}

pub fn verify(cfg: &ConfigFile, ov: &Overrides, outputs: &Outputs<'_>) -> Result<i32, Failure> {
    let v = prepare(cfg, ov, false)?;
    let reports = run_verification(&v, cfg.eps(ov)).map_err(Failure::Run)?;
    let mut all_pass = true;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for r in &reports {
        all_pass &= r.pass;
        let _ = writeln!(
            lock,
            "{} {:<26} value={:<24} threshold={:<24} {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            format_float(r.value),
            format_float(r.threshold),
            r.detail
        );
    }
    let _ = writeln!(
        lock,
        "{}: {} of {} checks passed",
        if all_pass { "OK" } else { "FAILED" },
        reports.iter().filter(|r| r.pass).count(),
        reports.len()
    );
    drop(lock);
    if let Some(dir) = outputs.out_dir {
        let json = Json::Arr(
            reports
                .iter()
                .map(|r| {
                    Json::obj(vec![
                        ("name", Json::str(r.name)),
                        ("value", Json::Num(r.value)),
                        ("threshold", Json::Num(r.threshold)),
                        ("pass", Json::Bool(r.pass)),
                        ("detail", Json::str(r.detail.clone())),
                    ])
                })
                .collect(),
        );
        write_file(dir, "verify.json", &json.render())?;
        write_meta(dir, "verify")?;
    }
    Ok(if all_pass { 0 } else { 4 })
}
