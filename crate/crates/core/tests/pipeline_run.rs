use std::fs;

use stabcal::blockdyn::{Assignment, UnitConfig, UnitModel};
use stabcal::nn::TrainConfig;
use stabcal::pipeline::{Pipeline, PipelineConfig, SUMMARY};
use stabcal::playback::{playback, PlaybackOptions, Trajectory};

fn small_run(dir: &std::path::Path, baseline: bool) -> Pipeline {
    let model = UnitModel::<f64>::from_config(&UnitConfig::default()).unwrap();
    let truth: Assignment<f64> = [("H".to_string(), 5.3), ("Tb".to_string(), 39.0)].into_iter().collect();
    let step = Trajectory::voltage_step(10.0, 30.0, 1.0, 1.0, 0.05).unwrap();
    let event = dir.join("event.csv");
    playback(&model, &truth, &step, &PlaybackOptions::default())
        .unwrap()
        .save_csv(&event)
        .unwrap();
    let cfg = PipelineConfig {
        event: Some(event),
        n: 30,
        baseline,
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        },
        out: dir.join("out"),
        ..Default::default()
    };
    Pipeline::new(cfg).unwrap()
}

#[test]
fn every_written_file_is_linked_from_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let pipe = small_run(dir.path(), true);
    let report = pipe.run().unwrap();
    assert!(report.post.is_some() == report.post_error.is_none());
    let summary = fs::read_to_string(pipe.out().join(SUMMARY)).unwrap();
    for entry in fs::read_dir(pipe.out()).unwrap() {
        let name = entry.unwrap().file_name().to_string_lossy().into_owned();
        if name != SUMMARY {
            assert!(summary.contains(&format!("]({name})")), "{name} not linked");
        }
    }
    assert!(report.pre.combined >= 0.0);
}

#[test]
fn dropping_the_baseline_removes_stale_mlp_files() {
    let dir = tempfile::tempdir().unwrap();
    let pipe = small_run(dir.path(), true);
    pipe.run().unwrap();
    assert!(pipe.out().join("mlp.json").exists());
    let mut cfg = pipe.config.clone();
    cfg.baseline = false;
    let pipe = Pipeline::new(cfg).unwrap();
    pipe.train().unwrap();
    pipe.predict().unwrap();
    let summary = pipe.report().unwrap();
    assert!(!pipe.out().join("mlp.json").exists());
    assert!(!summary.contains("MLP-calibrated"));
}
