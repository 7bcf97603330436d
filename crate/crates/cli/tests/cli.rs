use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn amd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amd"))
        .args(args)
        .current_dir(dir)
        .env_remove("AMD_THREADS")
        .output()
        .expect("spawn amd")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const CONFIG: &str = r#"{
  "preset": "toy",
  "data": {"csv": {"path": "series.csv"}},
  "split": {"mode": "ratio", "train": 0.7, "val": 0.1, "test": 0.2},
  "model": {"train": {"epochs": 2}}
}"#;

fn toy_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = amd(
        &["synth", "--kind", "sine", "--out", "series.csv", "--length", "300", "--channels", "2", "--period", "12", "--noise", "0.02", "--seed", "3"],
        dir.path(),
    );
    assert!(out.status.success());
    std::fs::write(dir.path().join("config.json"), CONFIG).unwrap();
    dir
}

#[test]
fn theorem_check_acceptance_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = amd(
        &["theorem-check", "--period", "24", "--length", "96", "--horizon", "48", "--trials", "100", "--seed", "7"],
        dir.path(),
    );
    let report = json(&out);
    assert_eq!(report["violations"].as_array().unwrap().len(), 0);
    assert_eq!(report["checked"], 4800);
    assert_eq!(report["passed"], true);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(amd(&["no-such-command"], dir.path()).status.code(), Some(1));
    assert_eq!(amd(&["theorem-check", "--period", "x"], dir.path()).status.code(), Some(1));
    assert_eq!(amd(&["--help"], dir.path()).status.code(), Some(0));
    let bad = amd(&["ablate", "--config", "missing.json", "--mode", "bogus"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown ablation"));
}

#[test]
fn missing_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = amd(&["predict", "--ckpt", "none.ckpt", "--input", "none.csv", "--out", "p.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_evaluate_predict_gates_pipeline() {
    let dir = toy_dir();
    let p = dir.path();
    let report = json(&amd(&["train", "--config", "config.json", "--out", "model.ckpt"], p));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    let test_mse = report["test"]["mse"].as_f64().unwrap();

    let eval = json(&amd(&["evaluate", "--ckpt", "model.ckpt", "--data", "series.csv", "--horizon", "1", "--horizon", "4"], p));
    let metrics = eval["metrics"].as_array().unwrap();
    assert_eq!(metrics.len(), 2);
    assert_eq!(metrics[0]["horizon"], 1);
    assert!((metrics[1]["mse"].as_f64().unwrap() - test_mse).abs() < 1e-12);
    assert!(amd(&["evaluate", "--ckpt", "model.ckpt", "--data", "series.csv", "--horizon", "5"], p)
        .status
        .code()
        == Some(1));

    assert!(amd(&["predict", "--ckpt", "model.ckpt", "--input", "series.csv", "--out", "forecast.csv"], p)
        .status
        .success());
    let forecast = std::fs::read_to_string(p.join("forecast.csv")).unwrap();
    let lines: Vec<&str> = forecast.lines().collect();
    assert_eq!(lines[0], "ch0,ch1");
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 2));

    assert!(amd(&["gates", "--ckpt", "model.ckpt", "--data", "series.csv", "--out", "gates.csv"], p)
        .status
        .success());
    let gates = std::fs::read_to_string(p.join("gates.csv")).unwrap();
    let mut rows = gates.lines();
    assert_eq!(rows.next().unwrap(), "window,start_row,channel,w0,w1");
    let mut count = 0;
    for row in rows {
        let sum: f64 = row.split(',').skip(3).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-8, "{row}");
        count += 1;
    }
    assert_eq!(count, (300 - 16 - 4 + 1) * 2);
}

#[test]
fn mismatched_channels_exit_two() {
    let dir = toy_dir();
    let p = dir.path();
    assert!(amd(&["train", "--config", "config.json", "--out", "model.ckpt"], p).status.success());
    assert!(amd(&["synth", "--out", "three.csv", "--channels", "3", "--length", "100"], p).status.success());
    let out = amd(&["evaluate", "--ckpt", "model.ckpt", "--data", "three.csv"], p);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("2 channels") && msg.contains("has 3"), "{msg}");
}

#[test]
fn ablate_reports_dense_and_average_rows() {
    let dir = toy_dir();
    let out = json(&amd(&["ablate", "--config", "config.json", "--mode", "average"], dir.path()));
    let rows = out["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["variant"], "dense");
    assert_eq!(rows[1]["variant"], "average");
    assert_eq!(rows[1]["mode"], "average");
    assert!(rows.iter().all(|r| r["test"]["mse"].as_f64().unwrap().is_finite()));
}

#[test]
fn training_is_deterministic_given_seed() {
    let dir = toy_dir();
    let p = dir.path();
    let a = json(&amd(&["train", "--config", "config.json", "--seed", "11"], p));
    let b = json(&amd(&["train", "--config", "config.json", "--seed", "11"], p));
    assert_eq!(a["best_val"], b["best_val"]);
    assert_eq!(a["test"], b["test"]);
}

#[test]
fn gradcheck_reports_every_block() {
    let dir = tempfile::tempdir().unwrap();
    let out = json(&amd(&["gradcheck"], dir.path()));
    let blocks = out["blocks"].as_array().unwrap();
    let names: Vec<&str> = blocks.iter().map(|b| b["block"].as_str().unwrap()).collect();
    assert_eq!(names, ["revin", "mdm", "ddi", "selector", "predictors"]);
    assert!(blocks.iter().all(|b| b["max_relative_error"].as_f64().unwrap() < 1e-4));
}

#[test]
fn threads_env_must_be_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_amd"))
        .args(["theorem-check", "--trials", "2"])
        .env("AMD_THREADS", "many")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
