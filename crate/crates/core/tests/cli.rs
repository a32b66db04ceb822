mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

use common::{merge, toy_json};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_randlabel")).args(args).output().unwrap()
}

fn write_config(dir: &Path, patch: serde_json::Value) -> String {
    let mut v = toy_json();
    merge(&mut v, &patch);
    let path = dir.join("config.json");
    fs::write(&path, v.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({"training": {"epochs": 3}}));
    let dir = tmp.path().join("out");
    let out = bin(&["run", &cfg, "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.resolved.json", "metrics.jsonl", "rnd_labels.json", "checkpoint.bin"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let report = bin(&["report", dir.to_str().unwrap()]);
    assert!(report.status.success());
    assert!(!report.stdout.is_empty());
}

#[test]
fn sweep_writes_a_summary_row_per_point() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({"training": {"epochs": 2}}));
    let out_dir = tmp.path().join("sweep");
    let out = bin(&["sweep", &cfg, "--axis", "lambda", "--values", "0,0.5", "--axis", "copy_depth", "--values", "1,full",
        "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(out_dir.join("summary.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "lambda") && headers.iter().any(|h| h == "copy_depth"));
    let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let status = headers.iter().position(|h| h == "status").unwrap();
    assert!(rows.iter().all(|r| &r[status] == "ok"));
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({"training": {"lamda": 1.0}}));
    let out = bin(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("training.lamda"));

    let cfg = write_config(tmp.path(), json!({"training": {"lambda": -1.0}}));
    assert_eq!(bin(&["run", &cfg]).status.code(), Some(2));
    let cfg = write_config(tmp.path(), json!({}));
    assert_eq!(bin(&["sweep", &cfg, "--axis", "nope", "--values", "1"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_3_and_keeps_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({"training": {"epochs": 50, "lr": 1e200}}));
    let out = bin(&["run", &cfg, "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("out/checkpoint.bin").is_file());
    assert!(tmp.path().join("out/metrics.jsonl").is_file());
}
