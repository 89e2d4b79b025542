use std::path::Path;
use std::process::{Command, Output};

fn stabcal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stabcal"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn stabcal")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn simulate(dir: &Path, name: &str, sets: &[&str]) {
    let mut args = vec!["simulate", "--output", name];
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    let o = stabcal(dir, &args);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn small_config(dir: &Path, event: &str) {
    let cfg = format!(
        r#"{{"event": "{event}", "n": 40, "train": {{"epochs": 2, "batch_size": 8}}, "workers": 1}}"#
    );
    std::fs::write(dir.join("cfg.json"), cfg).unwrap();
}

#[test]
fn self_consistent_event_needs_no_calibration() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "event.csv", &[]);
    small_config(dir.path(), "event.csv");
    let o = stabcal(dir.path(), &["-c", "cfg.json", "validate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("no calibration needed"));
    assert!(dir.path().join("out/comparison_pre.csv").exists());
    assert!(dir.path().join("out/comparison_pre.svg").exists());
}

#[test]
fn perturbed_inertia_needs_calibration() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "event.csv", &["H=5.75"]);
    small_config(dir.path(), "event.csv");
    let o = stabcal(dir.path(), &["-c", "cfg.json", "validate"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stdout(&o).contains("calibration needed"));
}

#[test]
fn missing_power_column_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("event.csv"), "t,vmag,vang,q\n0,1,0,0.2\n0.1,1,0,0.2\n").unwrap();
    small_config(dir.path(), "event.csv");
    let o = stabcal(dir.path(), &["-c", "cfg.json", "validate"]);
    assert!(!o.status.success());
    assert_ne!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("event.csv"), "{}", stderr(&o));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), r#"{"n": 0}"#).unwrap();
    let o = stabcal(dir.path(), &["-c", "cfg.json", "validate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = stabcal(dir.path(), &["-c", "missing.json", "validate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = stabcal(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn predict_before_train_reports_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "event.csv", &[]);
    small_config(dir.path(), "event.csv");
    let o = stabcal(dir.path(), &["-c", "cfg.json", "predict"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("checkpoint not found"), "{}", stderr(&o));
}

#[test]
fn report_on_empty_directory_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = stabcal(dir.path(), &["--out", "empty", "report"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    for a in ["validation_pre.json", "sensitivity.json", "cnn.json", "calibration_report.json"] {
        assert!(err.contains(a), "{a} not listed in: {err}");
    }
}

#[test]
fn staged_run_then_report_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "event.csv", &["H=5.2", "Ka=280"]);
    small_config(dir.path(), "event.csv");
    let o = stabcal(dir.path(), &["-c", "cfg.json", "validate"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    for stage in ["sensitivity", "generate", "train", "predict", "report"] {
        let mut args = vec!["-c", "cfg.json", stage];
        if stage == "train" || stage == "predict" {
            args.push("--baseline");
        }
        let o = stabcal(dir.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
    let summary = dir.path().join("out/summary.md");
    let first = std::fs::read(&summary).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert!(text.contains("| parameter | CNN mean | CNN max | MLP mean | MLP max |"));
    assert!(text.contains("MLP-predicted"));
    assert!(dir.path().join("out/loss_curves.svg").exists());

    let o = stabcal(dir.path(), &["-c", "cfg.json", "report"]);
    assert!(o.status.success());
    assert_eq!(first, std::fs::read(&summary).unwrap());
}
