//! End-to-end tests of the `lsde` binary: each test spawns the compiled
//! executable and inspects exit codes, stdout/stderr and the artifacts it
//! leaves on disk.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lsde() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lsde"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("failed to spawn lsde binary");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> (i32, String) {
    let out = cmd.output().expect("failed to spawn lsde binary");
    let code = out.status.code().expect("process terminated by signal");
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    (code, stderr)
}

/// A tiny double-well configuration that trains in well under a second.
const SMOKE_CONFIG: &str = r#"{
  "dataset": {
    "sde": "double_well1d",
    "map": {"kind": "linear", "latent_dim": 1, "ambient_dim": 2},
    "times": {"kind": "uniform", "t0": 0.0, "dt": 0.01, "n_steps": 60},
    "noise": {"kind": "none"}
  },
  "model": {
    "latent_dim": 1,
    "ambient_dim": 2,
    "encoder_hidden": [8],
    "decoder_hidden": [8],
    "drift_hidden": [8],
    "tau": 0.05,
    "chol_diag_bias_init": -3.0
  },
  "training": {"epochs": 5, "val_size": 10}
}"#;

fn write_config(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, contents).expect("failed to write config");
    path
}

#[test]
fn crlb_prints_reference_value() {
    let out = run_ok(lsde().args(["crlb", "--latent-dim", "2", "--dt", "0.01", "--n-pairs", "1000"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0.2"), "stdout was: {stdout}");
}

#[test]
fn unknown_sde_exits_2_and_names_catalog() {
    let tmp = TempDir::new().unwrap();
    let bad = SMOKE_CONFIG.replace("double_well1d", "nosuchsde");
    let cfg = write_config(tmp.path(), "bad.json", &bad);
    let (code, stderr) = exit_code(lsde().args([
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]));
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("nosuchsde"), "stderr: {stderr}");
    assert!(stderr.contains("ou2d"), "catalog should be listed, stderr: {stderr}");
}

#[test]
fn malformed_config_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "broken.json", "{ not json at all");
    let (code, stderr) = exit_code(lsde().args([
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]));
    assert_eq!(code, 2, "stderr: {stderr}");
}

#[test]
fn dimension_mismatch_exits_2() {
    let tmp = TempDir::new().unwrap();
    // Model claims ambient_dim 3 while the map produces 2.
    let bad = SMOKE_CONFIG.replace("\"ambient_dim\": 2,\n    \"encoder_hidden\"", "\"ambient_dim\": 3,\n    \"encoder_hidden\"");
    assert_ne!(bad, SMOKE_CONFIG, "replacement must hit");
    let cfg = write_config(tmp.path(), "mismatch.json", &bad);
    let (code, stderr) = exit_code(lsde().args([
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]));
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("ambient"), "stderr: {stderr}");
}

#[test]
fn run_produces_expected_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMOKE_CONFIG);
    let out_dir = tmp.path().join("out");
    let out = run_ok(lsde().args([
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--repeat",
        "2",
        "--csv",
    ]));

    for rel in [
        "config.json",
        "dataset/meta.json",
        "dataset/pairs.bin",
        "dataset/latent.bin",
        "repeat_00/model.json",
        "repeat_00/model.bin",
        "repeat_00/loss_log.csv",
        "repeat_00/metrics.json",
        "repeat_01/metrics.json",
        "metrics.json",
        "metrics.csv",
    ] {
        assert!(out_dir.join(rel).exists(), "missing artifact: {rel}");
    }

    // The echoed configuration spells out defaulted seeds explicitly.
    let echoed = fs::read_to_string(out_dir.join("config.json")).unwrap();
    assert!(echoed.contains("\"seed\": 0"), "config echo: {echoed}");

    // CSV table row on stdout with the documented header.
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("dataset,sde,l_latent,l_mu,crlb,reconstruction_mse"),
        "stdout: {stdout}"
    );
    assert!(stdout.contains("double_well1d"), "stdout: {stdout}");

    // metrics.csv carries mean/std rows for every reported metric.
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("metric,mean,std"), "metrics.csv: {csv}");
    for metric in ["l_latent", "l_mu", "reconstruction_mse", "crlb"] {
        assert!(csv.contains(metric), "metrics.csv missing {metric}: {csv}");
    }

    // Loss log has the documented header and one line per epoch.
    let log = fs::read_to_string(out_dir.join("repeat_00/loss_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,entropy,prior,transition,reconstruction,l1,total,val_total")
    );
    assert_eq!(lines.count(), 5, "expected one row per epoch");
}

#[test]
fn identical_runs_are_bitwise_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMOKE_CONFIG);
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        run_ok(lsde().args([
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    for rel in ["metrics.json", "repeat_00/metrics.json", "repeat_00/model.bin"] {
        let a = fs::read(out_a.join(rel)).unwrap();
        let b = fs::read(out_b.join(rel)).unwrap();
        assert_eq!(a, b, "artifact {rel} differs between identical runs");
    }
}

#[test]
fn generate_then_train_then_evaluate_pipeline() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMOKE_CONFIG);
    let gen_dir = tmp.path().join("gen");
    run_ok(lsde().args([
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        gen_dir.to_str().unwrap(),
    ]));
    assert!(gen_dir.join("dataset/meta.json").exists());

    let train_dir = tmp.path().join("train");
    run_ok(lsde().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        gen_dir.join("dataset").to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]));
    assert!(train_dir.join("model.json").exists());
    assert!(train_dir.join("model.bin").exists());

    let metrics_path = tmp.path().join("eval.json");
    let out = run_ok(lsde().args([
        "evaluate",
        "--dataset",
        gen_dir.join("dataset").to_str().unwrap(),
        "--model",
        train_dir.join("model").to_str().unwrap(),
        "--out",
        metrics_path.to_str().unwrap(),
        "--csv",
    ]));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&metrics_path).unwrap()).unwrap();
    assert!(metrics["l_latent"].as_f64().unwrap().is_finite());
    assert!(metrics["crlb"].as_f64().unwrap() > 0.0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("l_latent"), "stdout: {stdout}");
}

#[test]
fn dimsearch_linear_likelihood_selects_true_dimension() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "dim.json",
        r#"{
  "dataset": {
    "sde": "ou3d",
    "map": {"kind": "linear", "latent_dim": 3, "ambient_dim": 6, "seed": 11},
    "times": {"kind": "uniform", "t0": 0.0, "dt": 0.01, "n_steps": 400},
    "noise": {"kind": "none"},
    "seed": 7
  },
  "model": {"latent_dim": 3, "ambient_dim": 6, "tau": 0.01},
  "training": {"epochs": 1}
}"#,
    );
    let out_dir = tmp.path().join("out");
    run_ok(lsde().args([
        "dimsearch",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--mode",
        "linear-likelihood",
        "--candidates",
        "1,2,3,4,5",
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("dimsearch.json")).unwrap()).unwrap();
    assert_eq!(report["selected"], 3, "report: {report}");
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    // Candidates below the true dimension cannot explain the data.
    assert_eq!(rows[0]["loglik"].as_f64(), None, "j=1 should be -inf (null in JSON)");
}

#[test]
fn dimsearch_linear_likelihood_refuses_nonlinear_map() {
    let tmp = TempDir::new().unwrap();
    let nonlinear = r#"{
  "dataset": {
    "sde": "ou3d",
    "map": {"kind": "random_smooth", "latent_dim": 3, "ambient_dim": 6, "seed": 11},
    "times": {"kind": "uniform", "t0": 0.0, "dt": 0.01, "n_steps": 50},
    "noise": {"kind": "none"},
    "seed": 7
  },
  "model": {"latent_dim": 3, "ambient_dim": 6, "tau": 0.01},
  "training": {"epochs": 1}
}"#;
    let cfg = write_config(tmp.path(), "dim_nl.json", nonlinear);
    let (code, stderr) = exit_code(lsde().args([
        "dimsearch",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
        "--mode",
        "linear-likelihood",
        "--candidates",
        "2,3",
    ]));
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("random_smooth"), "stderr: {stderr}");
}

#[test]
fn lamperti_check_reports_reducibility() {
    let out = run_ok(lsde().args(["lamperti-check", "--sde", "gbm1d"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("point,t,curl_residual,symmetric,positive_definite"), "stdout: {stdout}");
    assert!(stdout.contains("# reducible: true"), "stdout: {stdout}");

    let out = run_ok(lsde().args(["lamperti-check", "--sde", "anisotropic3d"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("# reducible: false"), "stdout: {stdout}");
}
