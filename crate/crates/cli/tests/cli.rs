use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use s2h_core::persist::{read_trajectory, Checkpoint};

fn model() -> &'static str {
    r#"{
        "input": {"shape": [2], "group": "in"},
        "num_classes": 3,
        "groups": [
            {"id": "in", "channels": 2, "fixed": true},
            {"id": "h1", "channels": 8},
            {"id": "h2", "channels": 8},
            {"id": "out", "channels": 3, "fixed": true}
        ],
        "layers": [
            {"id": "fc1", "kind": "linear", "inputs": ["input"], "group": "h1"},
            {"id": "relu1", "kind": "relu", "inputs": ["fc1"]},
            {"id": "fc2", "kind": "linear", "inputs": ["relu1"], "group": "h2"},
            {"id": "relu2", "kind": "relu", "inputs": ["fc2"]},
            {"id": "fc3", "kind": "linear", "inputs": ["relu2"], "group": "out"}
        ]
    }"#
}

fn write_config(dir: &Path, prune: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{
            "model": {},
            "dataset": {{"kind": "blobs", "n": 300, "num_classes": 3}},
            "prune": {prune},
            "output_dir": "out",
            "checkpoint_every": 2{extra}
        }}"#,
        model()
    );
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2hprune"))
        .args(args)
        .env_remove("S2HPRUNE_OUT")
        .output()
        .unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err_line(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("s2hprune: error["), "{stderr}");
    stderr
}

const PRUNE: &str = r#"{"T": 0.5, "epochs": 6, "batch_size": 32}"#;

#[test]
fn prune_eval_export_agree() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), PRUNE, "");
    let c = cfg.to_str().unwrap();
    let report = ok_json(&["prune", "--config", c]);
    let out = dir.path().join("out");
    for f in ["final.ckpt", "trajectory.csv", "report.json", "checkpoints/epoch_0002.ckpt", "checkpoints/epoch_0006.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let traj = read_trajectory(&out.join("trajectory.csv")).unwrap();
    assert_eq!(traj.len(), 6);
    let last = traj.last().unwrap();
    assert_eq!(report["evaluation"]["report"]["hard_top1"].as_f64().unwrap(), last.hard_top1);

    let ev = ok_json(&["eval", "--config", c]);
    assert_eq!(ev["evaluation"]["report"]["hard_top1"].as_f64().unwrap(), last.hard_top1);

    let ex = ok_json(&["export", "--config", c]);
    assert_eq!(ex["flops_ratio"].as_f64().unwrap(), last.flops_hard);

    let compact = out.join("compact.ckpt");
    let ce = ok_json(&["eval", "--config", c, "--resume", compact.to_str().unwrap()]);
    assert_eq!(ce["top1"].as_f64().unwrap(), last.hard_top1);
    assert_eq!(ce["flops_ratio"].as_f64().unwrap(), last.flops_hard);
}

#[test]
fn reruns_are_byte_identical_and_resume_is_exact() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ca = write_config(a.path(), PRUNE, "");
    let cb = write_config(b.path(), PRUNE, "");
    ok_json(&["prune", "--config", ca.to_str().unwrap()]);
    ok_json(&["prune", "--config", cb.to_str().unwrap()]);
    for f in ["trajectory.csv", "final.ckpt", "report.json", "checkpoints/epoch_0004.ckpt"] {
        assert_eq!(fs::read(a.path().join("out").join(f)).unwrap(), fs::read(b.path().join("out").join(f)).unwrap(), "{f}");
    }

    // Resume b from epoch 2 into a fresh output dir.
    let c = TempDir::new().unwrap();
    let cc = write_config(c.path(), PRUNE, "");
    let mid = b.path().join("out/checkpoints/epoch_0002.ckpt");
    ok_json(&["prune", "--config", cc.to_str().unwrap(), "--resume", mid.to_str().unwrap()]);
    for f in ["trajectory.csv", "final.ckpt"] {
        assert_eq!(fs::read(a.path().join("out").join(f)).unwrap(), fs::read(c.path().join("out").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_and_out_env_override() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"T": 0.5, "epochs": 2}"#, "");
    let alt = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_s2hprune"))
        .args(["prune", "--config", cfg.to_str().unwrap(), "--seed", "7"])
        .env("S2HPRUNE_OUT", &alt)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["seed"], 7);
    assert!(alt.join("final.ckpt").exists());
    assert!(!dir.path().join("out").exists());
    let ck = Checkpoint::load(&alt.join("final.ckpt")).unwrap();
    assert_eq!(ck.header.config.unwrap().seed, 7);
}

#[test]
fn random_baseline_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"T": 0.4, "epochs": 3}"#, "");
    let c = cfg.to_str().unwrap();
    let first = ok_json(&["random-baseline", "--config", c]);
    let masks = fs::read(dir.path().join("out/random_masks.json")).unwrap();
    let second = ok_json(&["random-baseline", "--config", c]);
    assert_eq!(first, second);
    assert_eq!(masks, fs::read(dir.path().join("out/random_masks.json")).unwrap());
    assert!((first["flops_ratio"].as_f64().unwrap() - 0.4).abs() <= 0.01);
    let ev = ok_json(&["eval", "--config", c, "--resume", dir.path().join("out/random_compact.ckpt").to_str().unwrap()]);
    assert_eq!(ev["top1"], first["top1"]);
}

#[test]
fn finetune_needs_and_uses_a_source() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"T": 0.5, "epochs": 2, "mode": "soft_only"}"#, "");
    ok_json(&["prune", "--config", cfg.to_str().unwrap()]);

    let ft = TempDir::new().unwrap();
    let missing = write_config(ft.path(), r#"{"T": 0.5, "epochs": 2, "mode": "finetune"}"#, "");
    let line = err_line(&run(&["prune", "--config", missing.to_str().unwrap()]));
    assert!(line.contains("error[config]") && line.contains("source_checkpoint"), "{line}");

    let src = dir.path().join("out/final.ckpt");
    let extra = format!(r#", "source_checkpoint": {}"#, serde_json::to_string(src.to_str().unwrap()).unwrap());
    let with = write_config(ft.path(), r#"{"T": 0.5, "epochs": 2, "mode": "finetune"}"#, &extra);
    let report = ok_json(&["prune", "--config", with.to_str().unwrap()]);
    assert_eq!(report["mode"], "finetune");
}

#[test]
fn error_paths_exit_nonzero_with_one_line() {
    let dir = TempDir::new().unwrap();

    let bad = write_config(dir.path(), r#"{"T": 1.5}"#, "");
    let out = run(&["prune", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(err_line(&out).contains("$.prune.T"));

    let typo = write_config(dir.path(), r#"{"T": 0.5, "flop_target": 0.3}"#, "");
    let line = err_line(&run(&["prune", "--config", typo.to_str().unwrap()]));
    assert!(line.contains("flop_target") && line.contains("`T`"), "{line}");

    let infeasible = write_config(dir.path(), r#"{"T": 0.01}"#, "");
    let out = run(&["prune", "--config", infeasible.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(err_line(&out).contains("error[infeasible]"));

    let ok = write_config(dir.path(), PRUNE, "");
    let out = run(&["eval", "--config", ok.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
    assert!(err_line(&out).contains("error[checkpoint]"));

    let out = run(&["prune", "--config", dir.path().join("nope.json").to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
    err_line(&out);

    let out = run(&["prune"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(err_line(&out).contains("error[usage]"));
}

#[test]
fn hash_mismatch_names_both_hashes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), r#"{"T": 0.5, "epochs": 2}"#, "");
    ok_json(&["prune", "--config", cfg.to_str().unwrap()]);
    let ck = Checkpoint::load(&dir.path().join("out/final.ckpt")).unwrap();

    let other = TempDir::new().unwrap();
    let text = fs::read_to_string(&cfg).unwrap().replace(r#""channels": 8}"#, r#""channels": 6}"#);
    let changed = other.path().join("run.json");
    fs::write(&changed, text).unwrap();
    let ckpt = dir.path().join("out/final.ckpt");
    let out = run(&["eval", "--config", changed.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
    let line = err_line(&out);
    assert!(line.contains(&ck.header.model_hash), "{line}");
}
