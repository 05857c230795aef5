//! End-to-end checks of the command-line surface.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_collsim"))
}

fn data(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(path)
}

#[test]
fn run_emits_reports_and_exits_zero() {
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["run", "--scenario"])
        .arg(data("golden.toml"))
        .args(["--seed", "42", "--format", "json", "--out"])
        .arg(out.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.path().join("golden.report.json").exists());

    let status = bin()
        .args(["run", "--scenario"])
        .arg(data("golden.toml"))
        .args(["--format", "csv", "--no-plots", "--out"])
        .arg(out.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.path().join("golden.report.csv").exists());
}

#[test]
fn sweep_emits_csv() {
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["sweep", "--scenario"])
        .arg(data("ac_sweep.toml"))
        .args(["--seed", "1", "--format", "csv", "--no-plots", "--out"])
        .arg(out.path())
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.path().join("ac_sweep.sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines.len(), 1 + 11); // header plus k = 0..=10
    assert!(lines[0].starts_with("k,trials,mean_overhead"));
}

#[test]
fn plan_prints_the_partition() {
    let output = bin()
        .args([
            "plan",
            "--servers",
            "2",
            "--gpus",
            "8",
            "--lost-fraction",
            "0.5",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let v: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(v["strategy"], "r2cc_allreduce");
    let y = v["y"].as_f64().unwrap();
    assert!((y - 0.517241).abs() < 1e-5);
}

#[test]
fn rerank_repairs_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("ring.toml");
    std::fs::write(
        &input,
        "ring = [0, 1, 2, 3]\nrails = [[0, 1], [1], [0], [0, 1]]\n",
    )
    .unwrap();
    let output = bin()
        .args(["rerank", "--input"])
        .arg(&input)
        .output()
        .unwrap();
    assert!(output.status.success());
    let v: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(v["repaired_order"], serde_json::json!([1, 0, 2, 3]));
}

#[test]
fn schema_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        "strategy = \"bogus\"\n[topology]\nservers = 2\ngpus_per_server = 1\nnics_per_server = 1\n",
    )
    .unwrap();
    let output = bin()
        .args(["run", "--scenario"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(
        err.contains("strategy"),
        "error should name the offending field: {err}"
    );
}
