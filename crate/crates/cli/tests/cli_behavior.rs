//! Exit-code contract, configuration diagnostics and artifact emission.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_stoclq")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn scalar_config(n_block: &str) -> String {
    format!(
        r#"{{
  "problem": {{
    "grid": {{"t_start": 0.0, "t_end": 1.0, "steps": 400}},
    "coefficients": {{"a": [[0.0]], "k": [[0.0]], "l": [[1.0]]}},
    "weights": {{"g": [[0.0]], "q": [[0.0]], "r": [[0.0]]{n_block}, "delta": 0.5}},
    "manifold": {{"f": [[1.0]], "b": [0.3]}},
    "target": {{"c0": [1.0], "c1": [0.0]}}
  }},
  "transfer": {{"x0": [0.3]}},
  "settings": {{"mc_paths": 50, "seed": 7}}
}}"#
    )
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

#[test]
fn missing_weight_block_exits_3_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", &scalar_config(""));
    let out = run(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`n`") || err.contains(".n") || err.contains("weights"), "stderr: {err}");
}

#[test]
fn indefinite_weight_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "zero_n.json", &scalar_config(r#", "n": [[0.0]]"#));
    let out = run(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("positive"), "stderr: {err}");
}

#[test]
fn unreadable_config_exits_3() {
    let out = run(&["solve", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn ragged_matrix_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let body = scalar_config(r#", "n": [[1.0]]"#).replace("[[1.0], [0.3]]", "");
    let body = body.replace(r#""f": [[1.0]]"#, r#""f": [[1.0, 2.0], [3.0]]"#);
    let cfg = write(dir.path(), "ragged.json", &body);
    let out = run(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn solve_writes_reports_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.json", &scalar_config(r#", "n": [[1.0]]"#));
    let out_dir = dir.path().join("artifacts");
    let out = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--dump-riccati",
        "--dump-trajectories",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let report_file = std::fs::read(out_dir.join("report.json")).unwrap();
    assert_eq!(report_file, out.stdout, "file report differs from stdout report");
    assert!(out_dir.join("run_meta.json").exists());

    let sigma = std::fs::read_to_string(out_dir.join("sigma.csv")).unwrap();
    assert!(sigma.starts_with("step,time,sigma_1_1\n"));
    assert_eq!(sigma.lines().count(), 402);
    let phi = std::fs::read_to_string(out_dir.join("phi.csv")).unwrap();
    assert!(phi.starts_with("step,time,a_1,bc_1\n"));
    for name in ["x", "z", "v", "y"] {
        let csv = std::fs::read_to_string(out_dir.join(format!("{name}.csv"))).unwrap();
        assert!(csv.starts_with(&format!("path,step,time,{name}_1\n")), "{name} header");
        assert_eq!(csv.lines().count(), 1 + 50 * 401, "{name} rows");
    }
}

#[test]
fn transfer_matches_solve_for_full_scalar_pin() {
    // With the scalar manifold already pinning the full state and
    // minimum-energy weights, `transfer` reproduces `solve`.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.json", &scalar_config(r#", "n": [[1.0]]"#));
    let solve_out = run(&["solve", "--config", cfg.to_str().unwrap()]);
    let transfer_out = run(&["transfer", "--config", cfg.to_str().unwrap()]);
    assert_eq!(solve_out.status.code(), Some(0));
    assert_eq!(transfer_out.status.code(), Some(0));
    let a: serde_json::Value = serde_json::from_slice(&solve_out.stdout).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&transfer_out.stdout).unwrap();
    assert_eq!(a["command"], "solve");
    assert_eq!(b["command"], "transfer");
    let la = a["lambda_star"][0].as_f64().unwrap();
    let lb = b["lambda_star"][0].as_f64().unwrap();
    assert!((la - lb).abs() <= 1e-12);
    assert!((a["j_hat"].as_f64().unwrap() - b["j_hat"].as_f64().unwrap()).abs() <= 1e-12);
}

#[test]
fn transfer_without_x0_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let body = scalar_config(r#", "n": [[1.0]]"#).replace(r#"  "transfer": {"x0": [0.3]},
"#, "");
    let cfg = write(dir.path(), "no_x0.json", &body);
    let out = run(&["transfer", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reach_reports_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.json", &scalar_config(r#", "n": [[1.0]]"#));
    let out = run(&["reach", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["reachable"], serde_json::Value::Bool(true));
    assert!((report["xi"][0].as_f64().unwrap() + 0.7).abs() <= 1e-8);
    assert!(report["gramian_check"]["max_z_score"].as_f64().unwrap() <= 4.0);
}

#[test]
fn gramian_command_reports_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.json", &scalar_config(r#", "n": [[1.0]]"#));
    let out = run(&["gramian", "--config", cfg.to_str().unwrap(), "--paths", "500"]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let psi = report["comparison"]["psi_hat"][0][0].as_f64().unwrap();
    let sigma = report["comparison"]["sigma"][0][0].as_f64().unwrap();
    assert!((psi - 1.0).abs() <= 1e-10);
    assert!((sigma - 1.0).abs() <= 1e-10);
}

#[test]
fn transform_command_emits_canonical_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "raw.json",
        r#"{
  "raw_system": {
    "grid": {"t_start": 0.0, "t_end": 1.0, "steps": 100},
    "a": [[0.3]],
    "c": [[0.4]],
    "b": [[1.0, 0.0]],
    "d": [[1.0, 1.0]],
    "delta_d": 0.5
  }
}"#,
    );
    let out_dir = dir.path().join("artifacts");
    let out = run(&[
        "transform",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((report["k_first_node"][0][0].as_f64().unwrap() - 0.5).abs() <= 1e-12);
    assert!(
        (report["l_first_node"][0][0].as_f64().unwrap() - 0.5f64.sqrt()).abs() <= 1e-12
    );
    assert!(report["dm_error_max"].as_f64().unwrap() <= 1e-12);
    for file in ["m.csv", "abar.csv", "k.csv", "l.csv"] {
        assert!(out_dir.join(file).exists(), "{file} missing");
    }
}

#[test]
fn verify_command_prints_check_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.json", &scalar_config(r#", "n": [[1.0]]"#));
    let out = run(&["verify", "--config", cfg.to_str().unwrap(), "--paths", "400"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    for check in [
        "riccati_residual",
        "terminal_error",
        "stationarity_r1",
        "gramian_sigma_z",
        "perturbation_delta_j",
    ] {
        assert!(text.contains(check), "missing check {check} in:\n{text}");
    }
    assert!(text.lines().all(|l| l.starts_with("PASS") || l.starts_with("OK")), "{text}");
}

#[test]
fn solve_on_a_raw_only_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "raw_only.json",
        r#"{
  "raw_system": {
    "grid": {"t_start": 0.0, "t_end": 1.0, "steps": 100},
    "a": [[0.0]], "c": [[0.0]], "b": [[1.0, 0.0]], "d": [[1.0, 1.0]],
    "delta_d": 0.5
  }
}"#,
    );
    let out = run(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("problem"), "stderr: {err}");
}

#[test]
fn failed_verification_exits_4() {
    // An absurdly narrow Monte Carlo band makes the z-score checks fail on a
    // problem with a genuinely stochastic hat flow; the battery must report
    // FAIL lines and exit 4.
    let dir = tempfile::tempdir().unwrap();
    let body = scalar_config(r#", "n": [[1.0]]"#)
        .replace(r#""k": [[0.0]]"#, r#""k": [[1.0]]"#)
        .replace(r#""seed": 7"#, r#""seed": 7, "mc_sigma_mult": 1e-6"#);
    let cfg = write(dir.path(), "strict.json", &body);
    let out = run(&["verify", "--config", cfg.to_str().unwrap(), "--paths", "200"]);
    assert_eq!(out.status.code(), Some(4));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("FAIL"), "{text}");
}

#[test]
fn steps_override_applies_to_constant_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.json", &scalar_config(r#", "n": [[1.0]]"#));
    let out = run(&["solve", "--config", cfg.to_str().unwrap(), "--steps", "123"]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["problem"]["grid"]["steps"], 123);
    assert!((report["lambda_star"][0].as_f64().unwrap() - 0.7).abs() <= 1e-6);
}

#[test]
fn steps_override_requires_constant_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    // Per-node coefficient list of the right length for 2 steps.
    let body = r#"{
  "problem": {
    "grid": {"t_start": 0.0, "t_end": 1.0, "steps": 2},
    "coefficients": {"a": [[[0.0]], [[0.0]], [[0.0]]], "k": [[0.0]], "l": [[1.0]]},
    "weights": {"g": [[0.0]], "q": [[0.0]], "r": [[0.0]], "n": [[1.0]], "delta": 0.5},
    "manifold": {"f": [[1.0]], "b": [0.3]},
    "target": {"c0": [1.0], "c1": [0.0]}
  },
  "settings": {"mc_paths": 16, "seed": 7}
}"#;
    let cfg = write(dir.path(), "pernode.json", body);
    let ok = run(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&ok.stderr));
    let bad = run(&["solve", "--config", cfg.to_str().unwrap(), "--steps", "100"]);
    assert_eq!(bad.status.code(), Some(3));
}
