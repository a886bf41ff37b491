use std::path::Path;
use std::process::{Command, Output};

use ctrldiffuse_cli::commands;
use ctrldiffuse_cli::ExperimentConfig;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctrldiffuse")).args(args).env_remove("CTRLDIFFUSE_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

const SMALL: &[&str] = &["--learn-steps", "20000", "--m-states", "8", "--n-actions", "3", "--eval-rollouts", "200"];

#[test]
fn evaluating_a_table_against_itself_gives_zero_gap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut learn = vec!["learn", "--out", out];
    learn.extend_from_slice(SMALL);
    ok(&learn);
    let q = dir.path().join("qtable.csv");
    let q = q.to_str().unwrap();
    let mut eval = vec!["evaluate", "--q", q, "--reference-q", q, "--out", out];
    eval.extend_from_slice(SMALL);
    ok(&eval);
    let report: serde_json::Value = serde_json::from_str(&read(&dir.path().join("gap_report.json"))).unwrap();
    assert_eq!(report["gap"].as_f64().unwrap(), 0.0);
    assert_eq!(report["w_learned"], report["w_reference"]);
}

#[test]
fn zero_cost_learns_zero_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["learn", "--out", out, "--model", "constant", "--drift", "0.3", "--sigma", "0.5", "--cost-value", "0", "--learn-steps", "5000"]);
    let values = column(&read(&dir.path().join("qtable.csv")), "value");
    assert!(!values.is_empty());
    assert!(values.iter().all(|&v| v == 0.0));
}

#[test]
fn single_state_solve_matches_geometric_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&[
        "solve", "--out", out, "--model", "constant", "--drift", "0", "--sigma", "0", "--cost-value", "0.7", "--m-states", "1", "--n-actions",
        "1", "--h", "0.2", "--beta", "1", "--samples-per-pair", "10", "--vi-tolerance", "1e-12",
    ]);
    let q = column(&read(&dir.path().join("qstar.csv")), "value");
    let expected = 0.7 * 0.2 / (1.0 - (-0.2f64).exp());
    assert_eq!(q.len(), 1);
    assert!((q[0] - expected).abs() < 1e-9, "{} vs {expected}", q[0]);
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let unknown = bin(&["learn", "--out", out, "--no-such-key", "1"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("no_such_key"));
    let bad = bin(&["bounds", "--out", out, "--omega", "0.2"]);
    assert_eq!(bad.status.code(), Some(2));
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "beta = -1.0\n").unwrap();
    let bad_file = bin(&["learn", "--out", out, "--config", cfg.to_str().unwrap()]);
    assert_eq!(bad_file.status.code(), Some(2));
}

#[test]
fn partial_sweep_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = bin(&["sweep", "--out", out, "--sweep-h", "0.5,1.5", "--sweep-eps", "0.1", "--sweep-gap", "false", "--resolution-exponent", "1"]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = read(&dir.path().join("sweep.csv"));
    assert_eq!(csv.lines().count(), 3);
    let failed = csv.lines().skip(1).filter(|l| !l.ends_with(',')).count();
    assert_eq!(failed, 1, "{csv}");
}

#[test]
fn bounds_table_has_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let stdout = ok(&["bounds", "--out", out, "--sweep-h", "0.5,0.25", "--resolution-exponent", "1.5"]);
    assert!(!stdout.is_empty());
    let csv = read(&dir.path().join("bounds.csv"));
    assert_eq!(csv.lines().next().unwrap(), commands::BOUNDS_CSV_HEADER);
    assert_eq!(csv.lines().count(), 3);
    let h = column(&csv, "h");
    assert_eq!(h, vec![0.5, 0.25]);
    let t = column(&csv, "T_linear");
    assert!(t.iter().all(|v| v.is_finite() && *v > 0.0));
}

#[test]
fn manifest_verifies_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut learn = vec!["learn", "--out", out];
    learn.extend_from_slice(SMALL);
    ok(&learn);
    let manifest = dir.path().join("manifest.json");
    ok(&["verify", manifest.to_str().unwrap()]);
    std::fs::write(dir.path().join("qtable.csv"), "state,action,value,visits\n").unwrap();
    assert_eq!(bin(&["verify", manifest.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn seed_precedence_flag_over_env_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 5\nlearn_steps = 2000\n").unwrap();
    let run = |sub: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(sub);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ctrldiffuse"));
        cmd.args(["learn", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        cmd.env_remove("CTRLDIFFUSE_SEED");
        if let Some(e) = env {
            cmd.env("CTRLDIFFUSE_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.status().unwrap().success());
        let m: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
        m["config"]["seed"].as_u64().unwrap()
    };
    assert_eq!(run("a", None, None), 5);
    assert_eq!(run("b", Some("6"), None), 6);
    assert_eq!(run("c", Some("6"), Some("7")), 7);
}

#[test]
fn single_cell_sweep_matches_learn_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        h: 0.4,
        sweep_h: vec![0.4],
        sweep_eps: vec![0.1],
        m_states: 8,
        n_actions: 3,
        learn_steps: 20_000,
        eval_rollouts: 200,
        reference_h: 0.2,
        reference_samples_per_pair: 50,
        seed: 9,
        out: dir.path().to_path_buf(),
        ..Default::default()
    };
    commands::cmd_learn(&cfg).unwrap();
    let (_, single) = commands::cmd_evaluate(&cfg, None, None).unwrap();
    let sweep = commands::run_sweep(&cfg).unwrap();
    assert_eq!(sweep.rows.len(), 1);
    assert_eq!(sweep.rows[0].gap.unwrap(), single);
}
