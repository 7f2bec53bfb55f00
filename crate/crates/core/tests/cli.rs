use std::fs;
use std::process::Command;

fn tadaf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tadaf"))
}

#[test]
fn selftest_passes() {
    let out = tadaf().arg("selftest").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 2);
}

#[test]
fn train_then_metrics_with_config_file_and_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "dataset=synth\nsynth_classes=3\nsynth_per_class=20\nsynth_side=6\nsynth_test_per_class=5\nmodel=mlp\nhidden=6\npresets=333\nepochs=9\nschedule=desk\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = tadaf()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--epochs", "2", "--output"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = out_dir.join("epochs.csv");
    let rows = fs::read_to_string(&csv).unwrap().lines().count();
    assert_eq!(rows, 1 + 2 * 2, "command-line epochs must win over the file");
    assert!(out_dir.join("summary.json").exists());
    assert!(out_dir.join("checkpoint_333.txt").exists());

    let m = tadaf().arg("metrics").arg(&csv).output().unwrap();
    assert!(m.status.success());
    let v: serde_json::Value = serde_json::from_slice(&m.stdout).unwrap();
    assert_eq!(v["variants"].as_array().unwrap().len(), 2);
}

#[test]
fn errors_exit_nonzero() {
    let bad_key = tadaf().args(["train", "--presets", "999"]).output().unwrap();
    assert!(!bad_key.status.success());
    let missing = tadaf().args(["metrics", "/nonexistent.csv"]).output().unwrap();
    assert!(!missing.status.success());
    let no_data = tadaf()
        .args(["train", "--dataset", "cifar10", "--data-dir", "/nonexistent", "--epochs", "1"])
        .env_remove("TADAF_DATA_DIR")
        .output()
        .unwrap();
    assert!(!no_data.status.success());
}
