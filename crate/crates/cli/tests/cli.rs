use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lstd_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lstd-lab")).args(args).env("LSTD_LAB_THREADS", "2").output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn prop1_scalar_case() {
    let out = lstd_lab(&["prop1", "--lambda", "0", "--gamma", "0.9", "--T", "10", "--mu", "1", "--sigma", "1", "--runs", "0"]);
    let v = stdout_json(&out);
    let cf = &v["closed_form"];
    assert!((cf["a_boy_t"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((cf["a_unc_t"].as_f64().unwrap() - 1.9).abs() < 1e-12);
    assert_eq!(cf["T"], 10);
    assert!(v.get("monte_carlo").is_none());
}

#[test]
fn prop1_with_monte_carlo() {
    let out = lstd_lab(&["prop1", "--lambda", "0.5", "--gamma", "0.9", "--T", "50", "--mu", "1", "--sigma", "1", "--runs", "2000", "--seed", "3"]);
    let v = stdout_json(&out);
    assert_eq!(v["monte_carlo"]["runs"], 2000);
    assert_eq!(v["monte_carlo"]["seed"], 3);
}

#[test]
fn gen_mrp_single_state() {
    let out = lstd_lab(&["gen-mrp", "--n", "1", "--branch", "1", "--sigma", "0", "--seed", "7"]);
    let v = stdout_json(&out);
    assert_eq!(v["P"], serde_json::json!([[1.0]]));
    assert_eq!(v["n"], 1);
}

#[test]
fn gen_mrp_then_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let mrp = dir.path().join("m.json");
    let mrp_s = mrp.to_str().unwrap();
    let out = lstd_lab(&["gen-mrp", "--n", "6", "--branch", "6", "--sigma", "0.1", "--seed", "2", "--features", "binary", "--out", mrp_s]);
    assert!(out.status.success());
    let snap: Value = serde_json::from_str(&std::fs::read_to_string(&mrp).unwrap()).unwrap();
    assert_eq!(snap["kind"], "binary");
    assert_eq!(snap["d"], 3);

    let stored = stdout_json(&lstd_lab(&["fixed-point", "--mrp", mrp_s, "--lambda", "0.5", "--gamma", "0.9"]));
    assert_eq!(stored["theta_bar"].as_array().unwrap().len(), 3);
    let tabular = stdout_json(&lstd_lab(&["fixed-point", "--mrp", mrp_s, "--features", "tabular", "--lambda", "0.5", "--gamma", "0.9"]));
    assert_eq!(tabular["a_bar"].as_array().unwrap().len(), 6);
    assert_eq!(tabular["feature_seed"], 0);
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(&dir.path().join("c.json"), r#"{"algorithms": ["boyan"], "T": 20, "runs": 2, "base_seed": 5}"#);
    let csv = dir.path().join("r.csv");
    let out = lstd_lab(&["sweep", "--config", &config, "--out", csv.to_str().unwrap()]);
    let summary = stdout_json(&out);
    assert_eq!(summary["records"], 680);
    assert_eq!(summary["config"]["base_seed"], 5);
    assert_eq!(summary["best"].as_array().unwrap().len(), 20);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "mrp,features,algo,lambda,alpha,run,seed,mse,wall_ms,failed");
    assert_eq!(lines.count(), 680);
}

#[test]
fn failed_cells_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(&dir.path().join("c.json"), r#"{"algorithms": ["uncorrected"], "lambda_grid": [0.5], "alpha_grid": [0.0, 1.0], "T": 30, "runs": 1}"#);
    let csv = dir.path().join("r.csv");
    let out = lstd_lab(&["sweep", "--config", &config, "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(csv.exists());

    let out = lstd_lab(&["run", "--config", &config, "--algo", "uncorrected", "--lambda", "0.5", "--alpha", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["record"]["failed"], true);

    let ok = stdout_json(&lstd_lab(&["run", "--config", &config, "--algo", "uncorrected", "--lambda", "0.5", "--alpha", "1"]));
    assert_eq!(ok["record"]["failed"], false);
    assert_eq!(ok["config"]["T"], 30);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(lstd_lab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(lstd_lab(&["prop1", "--lambda", "0", "--bogus", "1"]).status.code(), Some(2));
    assert_eq!(lstd_lab(&["sweep", "--config", "/nonexistent/c.json", "--out", "/tmp/x.csv"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let config = write(&dir.path().join("c.json"), r#"{"T": 30, "runs": 1}"#);
    let out = lstd_lab(&["run", "--config", &config, "--algo", "boyan", "--lambda", "0.33", "--alpha", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn timing_of_empty_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(&dir.path().join("c.json"), r#"{"T": 0, "algorithms": ["boyan", "td_baseline"]}"#);
    let v = stdout_json(&lstd_lab(&["timing", "--config", &config, "--reps", "2"]));
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["cells"], 600);
    assert!((rows[1]["normalization"].as_f64().unwrap() - 340.0 / 600.0).abs() < 1e-15);
    assert!(rows.iter().all(|r| r["mean_s"].as_f64().unwrap() < 0.5));
}
