mod common;

use std::path::Path;
use std::process::{Command, Output};

fn xover(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xover")).args(args).output().unwrap()
}

fn standin() -> String {
    common::standin_path().to_str().unwrap().to_owned()
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn analyze_full_grid() {
    let d = standin();
    let out = xover(&["analyze", "--data", &d, "--placebo", "F", "--all", "--format", "json"]);
    let v = json(&out);
    assert_eq!(v["dataset"]["n"], 39);
    assert_eq!(v["options"]["configurations"].as_array().unwrap().len(), 13);
    assert_eq!(v["estimates"].as_array().unwrap().len(), 13 * 3 * 5);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("dropped subject 7"));
    assert!(stderr.contains("dropped subject 23"));
}

#[test]
fn analyze_single_configuration() {
    let d = standin();
    let v = json(&xover(&[
        "analyze", "--data", &d, "--placebo", "F", "--mean", "abm", "--cov", "unstructured", "--treatment", "E",
        "--format", "json",
    ]));
    let est = v["estimates"].as_array().unwrap();
    assert_eq!(est.len(), 5);
    let e4 = est.iter().find(|e| e["time"] == 4.0).unwrap();
    assert!((e4["estimate"].as_f64().unwrap() - 8.32).abs() < 0.005);
    assert_eq!(e4["configuration"], "abm+unstructured");
}

#[test]
fn frozen_test_decisions_for_positive_control() {
    let d = standin();
    let v = json(&xover(&[
        "analyze", "--data", &d, "--placebo", "F", "--mean", "abm", "--cov", "unstructured", "--treatment", "E",
        "--tests", "--seed", "1", "--format", "json",
    ]));
    let t = &v["tests"][0];
    let decisions: Vec<bool> =
        t["no_prolongation"]["decisions"].as_array().unwrap().iter().map(|x| x.as_bool().unwrap()).collect();
    // the last timepoint's upper limit exceeds the margin
    assert_eq!(decisions, [true, true, true, true, false]);
    assert_eq!(t["no_prolongation"]["reject"], false);
    assert_eq!(t["positive_control"]["reject"], false);
    let c = t["positive_control"]["critical_value"].as_f64().unwrap();
    assert!((c - 2.3736).abs() < 1e-3, "{c}");
}

#[test]
fn writes_report_files() {
    let d = standin();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("tqt");
    let out = xover(&["analyze", "--data", &d, "--placebo", "F", "--out", stem.to_str().unwrap()]);
    assert!(out.status.success());
    for ext in ["json", "csv", "txt"] {
        let p = format!("{}.report.{ext}", stem.display());
        assert!(Path::new(&p).exists(), "{p}");
    }
    let txt = std::fs::read_to_string(format!("{}.report.txt", stem.display())).unwrap();
    assert!(txt.contains("Treatment E vs F, time 4.0"));
    assert!(txt.contains("paired difference (mu1)"));
}

#[test]
fn exit_codes() {
    let d = standin();
    assert_eq!(xover(&["analyze", "--data", &d]).status.code(), Some(2));
    assert_eq!(xover(&["analyze", "--data", "/nonexistent.csv", "--placebo", "F"]).status.code(), Some(1));
    assert_eq!(xover(&["analyze", "--data", &d, "--placebo", "Q"]).status.code(), Some(1));
    assert_eq!(xover(&["analyze", "--data", &d, "--placebo", "F", "--mean", "quadratic"]).status.code(), Some(2));
    assert_eq!(xover(&["--help"]).status.code(), Some(0));
}

#[test]
fn verify_passes_and_detects_a_dense_weight() {
    let d = standin();
    let ok = xover(&["verify", "--data", &d, "--placebo", "F"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = xover(&["verify", "--data", &d, "--placebo", "F", "--inject-dense-weight"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn simulate_is_reproducible_and_worker_independent() {
    let d = standin();
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen.json");
    let out = xover(&["fit-generator", "--data", &d, "--placebo", "F", "--out", gen.to_str().unwrap()]);
    assert!(out.status.success());
    let g = gen.to_str().unwrap();
    let run = |workers: &str, stem: &str| {
        let stem = dir.path().join(stem);
        let out = xover(&[
            "simulate", "--generator", g, "--reps", "12", "--seed", "5", "--workers", workers, "--out",
            stem.to_str().unwrap(), "--config", "abm+unstructured", "--config", "mu1",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(format!("{}.report.json", stem.display())).unwrap()
    };
    let a = run("1", "a");
    assert_eq!(a, run("8", "b"));
    assert_eq!(a, run("1", "c"));
    assert_eq!(xover(&["simulate", "--generator", g, "--reps", "0", "--seed", "1"]).status.code(), Some(2));
}
