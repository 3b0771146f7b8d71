//! End-to-end behavior of the `mhm` binary: exit codes, run manifests,
//! and a small generate-train-evaluate smoke pass.

use std::path::Path;
use std::process::Command;

fn mhm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mhm"))
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = mhm().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = mhm()
        .args(["train-detect", "--config", "/definitely/not/here.cfg", "--data"])
        .arg(dir.path())
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("does not exist"), "{msg}");
}

#[test]
fn unknown_config_key_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "face_size = 32\nmystery_knob = 3\n").unwrap();
    let out = mhm()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("mystery_knob") && msg.contains("line 2"), "{msg}");
}

#[test]
fn out_of_bounds_coordinate_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = mhm()
        .args(["analyze-quant", "--p", "300", "--q", "10", "--F", "256", "--L-list", "128", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of bounds"));
}

#[test]
fn seed_override_changes_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, sub: &str| {
        let out_dir = dir.path().join(format!("{sub}-{seed}"));
        let out = mhm()
            .args(["gen-data", "--out"])
            .arg(&out_dir)
            .args(["--count", "2", "--face_size", "32", "--seed", seed])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap()
    };
    let a = run("1", "a");
    let b = run("2", "b");
    assert_ne!(a, b);
    assert!(a.contains("seed = 1"));
    assert!(b.contains("seed = 2"));
}

fn read_run_txt(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("run.txt")).unwrap()
}

#[test]
fn smoke_generate_train_eval() {
    // gen 50 samples, 2 epochs, eval; well under the five-minute budget.
    let started = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = mhm()
        .args(["gen-data", "--out"])
        .arg(&data)
        .args(["--count", "50", "--face_size", "32", "--seed", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let train_out = dir.path().join("train");
    let out = mhm()
        .args(["train-detect", "--data"])
        .arg(&data)
        .args(["--out"])
        .arg(&train_out)
        .args([
            "--face_size", "32", "--heatmap_size", "32", "--hourglass_depth", "2",
            "--base_channels", "4", "--head_channels", "4", "--deconv_channels", "2",
            "--epochs", "2", "--seed", "5",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(train_out.join("checkpoint.mhm").exists());
    let metrics = std::fs::read_to_string(train_out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_loss,val_nrmse\n"));
    assert_eq!(metrics.lines().count(), 3);
    let run = read_run_txt(&train_out);
    assert!(run.contains("subcommand = train-detect"));
    assert!(run.contains("face_size = 32"));
    assert!(run.contains("seed = 5"));

    let eval_out = dir.path().join("eval");
    let out = mhm()
        .args(["eval", "--checkpoint"])
        .arg(train_out.join("checkpoint.mhm"))
        .args(["--data"])
        .arg(&data)
        .args(["--out"])
        .arg(&eval_out)
        .args([
            "--face_size", "32", "--heatmap_size", "32", "--hourglass_depth", "2",
            "--base_channels", "4", "--head_channels", "4", "--deconv_channels", "2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(eval_out.join("eval_summary.txt")).unwrap();
    assert!(summary.contains("mean_nrmse = "));
    assert!(summary.contains("group_eyes = "));
    let csv = std::fs::read_to_string(eval_out.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51); // header + 50 samples
    assert!(started.elapsed() < std::time::Duration::from_secs(300));
}

#[test]
fn train_track_writes_tracking_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = mhm()
        .args(["gen-data", "--out"])
        .arg(&data)
        .args([
            "--count", "0", "--clips", "5", "--clip_length", "3", "--face_size", "32",
            "--motion_scale", "1.0", "--occlusion_prob", "0.2", "--seed", "4",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let train_out = dir.path().join("track");
    let out = mhm()
        .args(["train-track", "--data"])
        .arg(&data)
        .args(["--out"])
        .arg(&train_out)
        .args([
            "--face_size", "32", "--heatmap_size", "32", "--hourglass_depth", "2",
            "--base_channels", "4", "--head_channels", "4", "--deconv_channels", "2",
            "--epochs", "1", "--tracker_epochs", "1", "--clip_length", "3",
            "--tracker_channels", "4", "--batch_size", "4",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(train_out.join("checkpoint.mhm").exists());
    assert!(train_out.join("metrics_phase1.csv").exists());
    assert!(train_out.join("metrics_phase2.csv").exists());
    let track = std::fs::read_to_string(train_out.join("track_0000.csv")).unwrap();
    assert!(track.starts_with("frame,landmark,x,y\n"));
    // 3 frames x 5 landmarks + header
    assert_eq!(track.lines().count(), 16);
}
