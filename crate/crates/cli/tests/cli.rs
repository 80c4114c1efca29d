//! Runs the `loract` binary and checks exit codes and report contents.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use loract::linalg::{save_matrix, Matrix, Precision};
use serde_json::Value;

fn loract(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loract"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("LORACT_THREADS")
        .output()
        .expect("binary runs")
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut reader = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let headers = reader.headers().unwrap().clone();
    reader
        .records()
        .map(|r| headers.iter().map(String::from).zip(r.unwrap().iter().map(String::from)).collect())
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|_| panic!("{key} = {:?}", row[key]))
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn spectrum_of_diagonal_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("diag.bin");
    save_matrix(&fixture, &Matrix::diag(&[5.0, 3.0, 1.0]), Precision::F64).unwrap();
    let out = loract(dir.path(), &["spectrum", "--input", fixture.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sigma: Vec<f64> = read_csv(&dir.path().join("spectrum.csv")).iter().map(|r| num(r, "sigma")).collect();
    assert_eq!(sigma, [5.0, 3.0, 1.0]);
}

#[test]
fn spectrum_of_low_rank_plus_noise_has_short_head() {
    let dir = tempfile::tempdir().unwrap();
    let out = loract(dir.path(), &["spectrum"]);
    assert_eq!(out.status.code(), Some(0));
    let kept = read_csv(&dir.path().join("spectrum_kept.csv"));
    let at = |f: f64| kept.iter().find(|r| num(r, "fraction") == f).map(|r| num(r, "kept_ratio")).unwrap();
    assert!(at(0.9) <= 0.5, "kept ratio {}", at(0.9));
    assert_eq!(at(1.0), 1.0);
}

#[test]
fn all_zero_input_fails_with_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("zero.bin");
    save_matrix(&fixture, &Matrix::zeros(4, 3), Precision::F64).unwrap();
    let out = loract(dir.path(), &["spectrum", "--input", fixture.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let checks = read_csv(&dir.path().join("spectrum_checks.csv"));
    assert_eq!(checks[0]["check"], "run");
    assert_eq!(checks[0]["passed"], "false");
}

#[test]
fn decompose_recovers_exact_rank_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[decompose.source]\ngenerator = \"exact_rank\"\nm = 128\nn = 64\nrank = 8\n");
    let out = loract(dir.path(), &["decompose", "--config", &config, "--k", "8"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&dir.path().join("decompose.csv"));
    assert_eq!(rows.len(), 4);
    for row in &rows {
        let err = num(row, "spectral_err");
        match row["method"].as_str() {
            "tsvd" => assert!(err <= 1e-10, "tsvd {err}"),
            "randproj" => assert!(err > 1.0, "random projection is not a projection, got {err}"),
            other => assert!(err <= 1e-6, "{other} {err}"),
        }
    }
    let timing = read_csv(&dir.path().join("decompose_timing.csv"));
    assert!(timing.iter().all(|r| num(r, "wall_ns") > 0.0));
}

#[test]
fn unreadable_fixture_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = loract(dir.path(), &["decompose", "--input", "/nonexistent/matrix.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}

#[test]
fn gradcheck_passes_and_detects_a_corrupted_backward() {
    let dir = tempfile::tempdir().unwrap();
    let good = loract(&dir.path().join("good"), &["gradcheck"]);
    assert_eq!(good.status.code(), Some(0), "{}", String::from_utf8_lossy(&good.stderr));

    let bad = loract(&dir.path().join("bad"), &["gradcheck", "--flip-norm-correction"]);
    assert_eq!(bad.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("FAIL prenorm exact vs tape"), "{stderr}");
    assert!(stderr.contains("FAIL unit backward"), "{stderr}");
    let doc: Value = serde_json::from_slice(&std::fs::read(dir.path().join("bad/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(doc["passed"], Value::Bool(false));
}

#[test]
fn bounds_theorem_filter_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = loract(dir.path(), &["bounds", "--theorem", "3.3", "--trials", "1000"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&dir.path().join("bounds.csv"));
    assert_eq!(rows.len(), 1000);
    assert!(rows.iter().all(|r| r["theorem"] == "3.3"));
    let doc: Value = serde_json::from_slice(&std::fs::read(dir.path().join("bounds.json")).unwrap()).unwrap();
    let records = doc["records"].as_array().unwrap();
    assert_eq!(records.len(), 1000);
    for key in ["theorem", "params", "lhs", "rhs", "stderr", "holds", "trials", "seed"] {
        assert!(records[0].get(key).is_some(), "record lacks {key}");
    }
    assert_eq!(doc["meta"]["seed"], Value::from(0));
    assert_eq!(doc["meta"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn train_sweep_emits_curves_and_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    let out = loract(dir.path(), &["train", "--steps", "50", "--ratio", "1,0.5,0.25,0.125"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let curves = read_csv(&dir.path().join("train_curves.csv"));
    assert_eq!(curves.len(), 4 * 50);
    let summary = read_csv(&dir.path().join("train.csv"));
    let ratio_at = |r: f64| summary.iter().find(|row| num(row, "ratio") == r).map(|row| num(row, "ledger_ratio")).unwrap();
    assert!(ratio_at(0.125) < ratio_at(0.5));
    assert_eq!(ratio_at(1.0), 1.0);
    let ledger = read_csv(&dir.path().join("train_ledger.csv"));
    assert!(ledger.iter().any(|r| r["label"].ends_with(".rms")));
}

#[test]
fn memsweep_matches_formula() {
    let dir = tempfile::tempdir().unwrap();
    let out = loract(dir.path(), &["memsweep", "--ratio", "0.125"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&dir.path().join("memsweep.csv"));
    assert_eq!(rows.len(), 12);
    for row in rows {
        assert_eq!(row["exact_bytes"], row["analytic_exact"]);
        assert_eq!(row["stored_bytes"], row["analytic_stored"]);
    }
}

#[test]
fn unknown_config_key_exits_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "seed = 3\n\n[policy]\nration = 0.5\n");
    let out = loract(dir.path(), &["memsweep", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("ration") && stderr.contains("line 4"), "{stderr}");
}

#[test]
fn json_only_format_skips_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = loract(dir.path(), &["memsweep", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let names: Vec<String> =
        std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names, ["memsweep.json"]);
}

#[test]
fn invalid_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_loract"))
        .args(["memsweep", "--out"])
        .arg(dir.path())
        .env("LORACT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("LORACT_THREADS"));
}
