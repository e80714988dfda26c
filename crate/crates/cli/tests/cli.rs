//! End-to-end tests of the `secnn` binary: exit codes, artifact layout, and
//! the documented expectation guards.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn secnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_secnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen_data(dir: &Path, per_class: usize, size: usize) {
    let out = secnn(&[
        "gen-synth",
        "--out",
        dir.to_str().unwrap(),
        "--classes",
        "2",
        "--per-class",
        &per_class.to_string(),
        "--size",
        &size.to_string(),
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn inspect_expectation_guard() {
    let ok = secnn(&["inspect", "--model", "custom", "--classes", "2", "--expect-total", "641304"]);
    assert!(ok.status.success());
    assert!(stdout(&ok).contains("total params: 641304"));

    let bad = secnn(&["inspect", "--model", "custom", "--classes", "2", "--expect-total", "7"]);
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains('7') && err.contains("641304"), "both numbers printed: {err}");
}

#[test]
fn inspect_transfer_trainable_guard() {
    let out = secnn(&[
        "inspect", "--model", "resnet50", "--classes", "35", "--tl", "--expect-trainable", "71715",
    ]);
    assert!(out.status.success());
}

#[test]
fn unknown_model_is_config_error() {
    let out = secnn(&["inspect", "--model", "alexnet", "--classes", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_layers_pass_and_are_deterministic() {
    let a = secnn(&["gradcheck", "--scope", "layers", "--seed", "3"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = secnn(&["gradcheck", "--scope", "layers", "--seed", "3"]);
    assert_eq!(stdout(&a), stdout(&b), "same seed must print identical errors");
    assert!(stdout(&a).contains("se_gate"));
}

#[test]
fn missing_data_dir_exits_2_without_artifacts() {
    let out_dir = TempDir::new().unwrap();
    let run = out_dir.path().join("run");
    let out = secnn(&[
        "train",
        "--data",
        "/nonexistent-secnn-data",
        "--out-dir",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!run.exists(), "no partial outputs on data error");
}

#[test]
fn train_writes_artifacts_and_eval_reads_checkpoint() {
    let data = TempDir::new().unwrap();
    gen_data(data.path(), 8, 16);
    let run = TempDir::new().unwrap();
    let out = secnn(&[
        "train",
        "--data",
        data.path().to_str().unwrap(),
        "--model",
        "custom",
        "--base-channels",
        "16",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--resolution",
        "16",
        "--head-dropout",
        "0.0",
        "--out-dir",
        run.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for artifact in ["checkpoint.ckpt", "curves.csv", "run_manifest.json", "report.json"] {
        assert!(run.path().join(artifact).exists(), "missing {artifact}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.path().join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["lr"], serde_json::json!(0.001));
    assert_eq!(manifest["config"]["epochs"], serde_json::json!(2));
    let curves = std::fs::read_to_string(run.path().join("curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,train_loss,train_acc,val_loss,val_acc,seconds"));
    assert_eq!(curves.lines().count(), 3);

    let eval = secnn(&[
        "eval",
        "--checkpoint",
        run.path().join("checkpoint.ckpt").to_str().unwrap(),
        "--data",
        data.path().to_str().unwrap(),
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(stdout(&eval).contains("weighted avg"));
}

#[test]
fn config_file_supplies_values_and_flags_win() {
    let data = TempDir::new().unwrap();
    gen_data(data.path(), 8, 16);
    let dir = TempDir::new().unwrap();
    let config_path = dir.path().join("run.json");
    std::fs::write(
        &config_path,
        format!(
            r#"{{"data": "{}", "model": "custom", "base-channels": 16, "epochs": 9,
                "batch-size": 8, "resolution": 16, "head-dropout": 0.0}}"#,
            data.path().display()
        ),
    )
    .unwrap();
    let run = dir.path().join("out");
    // --epochs 1 on the command line must beat epochs 9 from the file
    let out = secnn(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--epochs",
        "1",
        "--out-dir",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["epochs"], serde_json::json!(1));
    assert_eq!(manifest["config"]["base_channels"], serde_json::json!(16));
}

#[test]
fn unknown_config_key_is_config_error() {
    let dir = TempDir::new().unwrap();
    let config_path = dir.path().join("bad.json");
    std::fs::write(&config_path, r#"{"learning-rate": 0.1}"#).unwrap();
    let out = secnn(&["train", "--config", config_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn out_dir_env_var_is_honored() {
    let data = TempDir::new().unwrap();
    gen_data(data.path(), 8, 16);
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("envrun");
    let out = Command::new(env!("CARGO_BIN_EXE_secnn"))
        .env("SECNN_OUT_DIR", &run)
        .args([
            "train",
            "--data",
            data.path().to_str().unwrap(),
            "--base-channels",
            "16",
            "--epochs",
            "1",
            "--batch-size",
            "8",
            "--resolution",
            "16",
            "--head-dropout",
            "0.0",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint.ckpt").exists());
}
