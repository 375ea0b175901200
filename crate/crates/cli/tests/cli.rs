//! End-to-end tests driving the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

use gsa_core::gsa::AttentionSpec;
use gsa_core::grid::SymmetryClass;
use gsa_core::model::{ImageSpec, ModelConfig, SitMode};

fn gsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// 8x8 single-channel model over 4x4 windows, structured attention at both
/// stages.
fn tiny_config() -> ModelConfig {
    ModelConfig {
        mode: SitMode::Sit,
        image: ImageSpec { rows: 8, cols: 8, channels: 1 },
        stem: None,
        local_window: 4,
        local_patch: 4,
        dim_local: 8,
        dim_global: 8,
        local_layers: 1,
        global_layers: 1,
        local_attention: AttentionSpec { gk: true, gv: true, ..AttentionSpec::plain(2) },
        global_attention: AttentionSpec { gk: true, gv: true, ..AttentionSpec::plain(2) },
        local_variant: Some(SymmetryClass::DihedralDistance),
        global_variant: Some(SymmetryClass::DihedralDistance),
        pos_embed: false,
        num_classes: 4,
        graph_init: gsa_core::graph::GraphInit::NearIdentity { std: 0.02 },
        class_dropout: 0.0,
    }
}

fn write_config(dir: &Path, cfg: &ModelConfig) -> String {
    let path = dir.join("model.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn inspect_emits_class_map() {
    let out = gsa(&[
        "graph", "inspect", "--rows", "3", "--cols", "3", "--variant", "dihedral_distance",
    ]);
    assert_eq!(exit_code(&out), 0);
    let v = stdout_json(&out);
    assert_eq!(v["P"], 9);
    assert_eq!(v["num_classes"], 6);
    let idx = v["class_index"].as_array().unwrap();
    assert_eq!(idx.len(), 9);
    assert_eq!(idx[0].as_array().unwrap().len(), 9);
    // all zero-offset pairs share one class
    for i in 1..9 {
        assert_eq!(idx[i][i], idx[0][0]);
    }
}

#[test]
fn inspect_handles_line_grids() {
    let out = gsa(&[
        "graph", "inspect", "--rows", "1", "--cols", "4", "--variant", "shift1d",
        "--topology", "line1d",
    ]);
    assert_eq!(exit_code(&out), 0);
    let v = stdout_json(&out);
    assert_eq!(v["P"], 4);
    // signed offsets -3..3
    assert_eq!(v["num_classes"], 7);
}

#[test]
fn inspect_rejects_unknown_variant() {
    let out = gsa(&["graph", "inspect", "--rows", "3", "--cols", "3", "--variant", "bogus"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn inspect_rejects_variant_topology_mismatch() {
    let out = gsa(&[
        "graph", "inspect", "--rows", "1", "--cols", "4", "--variant", "hflip",
        "--topology", "line1d",
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(!out.stderr.is_empty());
}

#[test]
fn symcheck_passes_a_sound_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out = gsa(&["symcheck", "--config", &cfg, "--seeds", "3"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["pass"], true);
    assert!(v["checks"].as_array().unwrap().len() > 4);
}

#[test]
fn symcheck_rejects_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.dim_local = 9; // not divisible by the head count
    let path = write_config(dir.path(), &cfg);
    let out = gsa(&["symcheck", "--config", &path]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn train_writes_artifacts_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out_dir = dir.path().join("run");
    let task_flags = [
        "--task", "synthetic-rot", "--side", "8", "--train-size", "48", "--test-size", "24",
    ];

    let mut args = vec![
        "train", "--model", &cfg, "--out", out_dir.to_str().unwrap(), "--seed", "3",
        "--epochs", "2", "--batch-size", "16",
    ];
    args.extend_from_slice(&task_flags);
    let out = gsa(&args);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert_eq!(summary["epochs"], 2);
    let trained_acc = summary["test_acc"].as_f64().unwrap();

    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,train_acc,test_acc,rotated_test_acc,wall_time_s"));
    assert_eq!(csv.lines().count(), 3);

    let ckpt = out_dir.join("last.gsaw");
    let mut args = vec!["eval", "--ckpt", ckpt.to_str().unwrap(), "--seed", "3"];
    args.extend_from_slice(&task_flags);
    let out = gsa(&args);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    // same weights, same regenerated split: identical accuracy
    assert_eq!(v["test_acc"].as_f64().unwrap(), trained_acc);
    assert!(v["rotated_test_acc"].is_number());
}

#[test]
fn train_rejects_class_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.num_classes = 3; // synthetic task has 4
    let path = write_config(dir.path(), &cfg);
    let out = gsa(&[
        "train", "--model", &path, "--task", "synthetic-rot", "--side", "8",
        "--train-size", "16", "--test-size", "8", "--epochs", "1",
        "--out", dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn eval_rejects_missing_checkpoint() {
    let out = gsa(&[
        "eval", "--ckpt", "/nonexistent/path.gsaw", "--task", "synthetic-rot", "--side", "8",
        "--test-size", "8",
    ]);
    assert_eq!(exit_code(&out), 2);
}
