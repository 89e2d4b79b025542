//! Stage orchestration: validate, screen, generate, train, predict, report.
//!
//! Each stage reads its inputs from and writes its artifacts to one output
//! directory, so stages can be run separately and resumed.

mod config;
mod report;
pub mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockdyn::{Assignment, ModelError, UnitConfig, UnitModel};
use crate::datagen::{
    deviation_features, generate_dataset, normalize_inputs, split_dataset, DatagenError, Dataset, GenerateOptions,
};
use crate::nn::{
    build_cnn, build_mlp, load_checkpoint, predict, save_checkpoint, train, NnError, Network, Prediction,
    TrainingReport,
};
use crate::playback::{
    load_pmu_csv, mismatch, needs_calibration, playback, MismatchScore, PlaybackError, PlaybackOptions, Trajectory,
};
use crate::sensitivity::{rank_parameters, ParamSensitivity, SensitivityError, SensitivityOptions, SensitivityResult};

pub use config::{PipelineConfig, DEFAULT_CANDIDATES};
pub use report::{render_summary, required_artifacts};

pub const VALIDATION_PRE: &str = "validation_pre.json";
pub const COMPARISON_PRE_CSV: &str = "comparison_pre.csv";
pub const COMPARISON_PRE_SVG: &str = "comparison_pre.svg";
pub const SENSITIVITY_JSON: &str = "sensitivity.json";
pub const DATASET_DIR: &str = "dataset";
pub const CNN_CHECKPOINT: &str = "cnn.json";
pub const MLP_CHECKPOINT: &str = "mlp.json";
pub const TRAINING_CNN: &str = "training_cnn.json";
pub const TRAINING_MLP: &str = "training_mlp.json";
pub const LOSS_CNN_CSV: &str = "loss_cnn.csv";
pub const LOSS_MLP_CSV: &str = "loss_mlp.csv";
pub const LOSS_SVG: &str = "loss_curves.svg";
pub const CALIBRATION_REPORT: &str = "calibration_report.json";
pub const COMPARISON_POST_CSV: &str = "comparison_post.csv";
pub const COMPARISON_POST_SVG: &str = "comparison_post.svg";
pub const SUMMARY: &str = "summary.md";
/// Wall-clock stage durations, kept apart from the reproducible artifacts.
pub const TIMINGS: &str = "timings.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Event {
        path: PathBuf,
        #[source]
        source: PlaybackError,
    },
    #[error("{0}")]
    NotFound(String),
    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Playback(#[from] PlaybackError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl PipelineError {
    /// Configuration and usage problems, as opposed to runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

/// Result of replaying the event through the current model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub event: String,
    pub threshold: f64,
    pub score: MismatchScore,
    pub needs_calibration: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub name: String,
    pub original: f64,
    pub cnn: f64,
    pub cnn_clamped: bool,
    pub mlp: Option<f64>,
    pub mlp_clamped: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub event: String,
    pub mismatch_threshold: f64,
    pub pre: MismatchScore,
    pub pre_needs_calibration: bool,
    /// Sensitivity ranking, empty when screening was not run.
    pub sensitivity: Vec<ParamSensitivity<f64>>,
    pub calibrated: Vec<String>,
    pub parameters: Vec<ParameterRow>,
    /// Replay with the CNN estimates; absent if that simulation failed.
    pub post: Option<MismatchScore>,
    pub post_needs_calibration: Option<bool>,
    pub post_error: Option<String>,
    pub post_mlp: Option<MismatchScore>,
    /// `post.combined / pre.combined`.
    pub improvement_ratio: Option<f64>,
    pub artifacts: Vec<String>,
    pub timings: String,
}

/// What `train` produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub cnn: TrainingReport,
    pub mlp: Option<TrainingReport>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Stage runner bound to one configuration and output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.check()?;
        Ok(Self { config })
    }

    pub fn out(&self) -> &Path {
        &self.config.out
    }

    fn path(&self, name: &str) -> PathBuf {
        self.config.out.join(name)
    }

    fn ensure_out(&self) -> Result<(), PipelineError> {
        fs::create_dir_all(self.out()).map_err(io_err(self.out()))
    }

    fn in_pool<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R, PipelineError> {
        if self.config.workers == 0 {
            return Ok(f());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
        Ok(pool.install(f))
    }

    fn record_time(&self, stage: &str, start: Instant) -> Result<(), PipelineError> {
        let path = self.path(TIMINGS);
        let mut map: BTreeMap<String, f64> = if path.exists() { read_json(&path)? } else { BTreeMap::new() };
        map.insert(stage.into(), start.elapsed().as_secs_f64());
        write_json(&path, &map)
    }

    pub fn unit_config(&self) -> Result<UnitConfig, PipelineError> {
        let mut cfg = match &self.config.model {
            Some(p) => UnitConfig::from_path(p)?,
            None => UnitConfig::default(),
        };
        for (name, value) in &self.config.overrides {
            cfg.params.set_value(name, *value)?;
        }
        Ok(cfg)
    }

    pub fn model(&self) -> Result<UnitModel<f64>, PipelineError> {
        Ok(UnitModel::from_config(&self.unit_config()?)?)
    }

    /// The measured event; power channels are required.
    pub fn event(&self) -> Result<Trajectory<f64>, PipelineError> {
        let path = self.config.event_path()?;
        let traj = load_pmu_csv::<f64>(path).map_err(|source| PipelineError::Event {
            path: path.to_path_buf(),
            source,
        })?;
        for (ch, name) in [(&traj.p, "p"), (&traj.q, "q")] {
            if ch.is_none() {
                return Err(PipelineError::Event {
                    path: path.to_path_buf(),
                    source: PlaybackError::MissingColumn(name.into()),
                });
            }
        }
        Ok(traj)
    }

    fn event_name(&self) -> String {
        self.config.event.as_deref().map(file_name).unwrap_or_default()
    }

    fn write_comparison(
        &self,
        measured: &Trajectory<f64>,
        simulated: &Trajectory<f64>,
        csv_name: &str,
        svg_name: &str,
        title: &str,
    ) -> Result<(), PipelineError> {
        let t = measured.times();
        let (pm, qm) = (measured.p.as_ref().unwrap(), measured.q.as_ref().unwrap());
        let (ps, qs) = (simulated.p.as_ref().unwrap(), simulated.q.as_ref().unwrap());
        let mut csv = String::from("t,p_measured,p_simulated,q_measured,q_simulated\n");
        for k in 0..t.len() {
            csv.push_str(&format!("{},{},{},{},{}\n", t[k], pm[k], ps[k], qm[k], qs[k]));
        }
        write_text(&self.path(csv_name), &csv)?;
        let series = [
            svg::Series { label: "P measured", x: &t, y: pm, dashed: false },
            svg::Series { label: "P simulated", x: &t, y: ps, dashed: true },
            svg::Series { label: "Q measured", x: &t, y: qm, dashed: false },
            svg::Series { label: "Q simulated", x: &t, y: qs, dashed: true },
        ];
        write_text(&self.path(svg_name), &svg::line_plot(title, "time (s)", "power (pu)", &series, false))
    }

    /// Replays the event through the configured model and scores the fit.
    pub fn validate(&self) -> Result<ValidationOutcome, PipelineError> {
        let start = Instant::now();
        self.ensure_out()?;
        let model = self.model()?;
        let event = self.event()?;
        let sim = playback(&model, &Assignment::new(), &event, &PlaybackOptions::default())?;
        let score = mismatch(&sim, &event)?;
        let outcome = ValidationOutcome {
            event: self.event_name(),
            threshold: self.config.mismatch_threshold,
            needs_calibration: needs_calibration(&score, self.config.mismatch_threshold),
            score,
        };
        self.write_comparison(&event, &sim, COMPARISON_PRE_CSV, COMPARISON_PRE_SVG, "Event playback before calibration")?;
        write_json(&self.path(VALIDATION_PRE), &outcome)?;
        self.record_time("validate", start)?;
        Ok(outcome)
    }

    /// Ranks the candidate parameters on the event.
    pub fn sensitivity(&self) -> Result<SensitivityResult<f64>, PipelineError> {
        let start = Instant::now();
        self.ensure_out()?;
        let model = self.model()?;
        let event = self.event()?;
        let mut ps = crate::blockdyn::ParameterSet::new();
        for name in &self.config.candidates {
            let e = model
                .params()
                .get(name)
                .ok_or_else(|| PipelineError::Config(format!("unknown candidate parameter \"{name}\"")))?;
            ps.push_with_factors(name, e.base_value, e.lower_factor, e.upper_factor, &e.unit)?;
        }
        let opts = SensitivityOptions {
            delta_fraction: self.config.delta_fraction,
            keep_ratio: self.config.keep_ratio,
            ..Default::default()
        };
        let result = self.in_pool(|| rank_parameters(&model, &event, &ps, &opts))??;
        write_text(&self.path(SENSITIVITY_JSON), &(result.to_json() + "\n"))?;
        self.record_time("sensitivity", start)?;
        Ok(result)
    }

    /// Parameters to calibrate: the configured list, else the screening selection.
    pub fn calibrated_parameters(&self) -> Result<Vec<String>, PipelineError> {
        if let Some(p) = &self.config.parameters {
            return Ok(p.clone());
        }
        let path = self.path(SENSITIVITY_JSON);
        if !path.exists() {
            return Err(PipelineError::NotFound(format!(
                "sensitivity results not found at {}; run `sensitivity` first or set `parameters`",
                path.display()
            )));
        }
        let res: SensitivityResult<f64> = read_json(&path)?;
        Ok(res.selected)
    }

    /// Simulates the training set, splits it and stores input statistics of
    /// the training rows. Inputs are saved unnormalized.
    pub fn generate(&self) -> Result<Dataset<f64>, PipelineError> {
        let start = Instant::now();
        self.ensure_out()?;
        let names = self.calibrated_parameters()?;
        let model = self.model()?;
        let event = self.event()?;
        let opts = GenerateOptions {
            n: self.config.n,
            seed: self.config.seed,
            noise_std: self.config.noise_std,
            workers: self.config.workers,
            event_id: self.event_name(),
            ..Default::default()
        };
        let mut ds = generate_dataset(&model, &event, &names, &opts)?;
        let [a, b, c] = self.config.split;
        let split = split_dataset(&mut ds, (a, b, c), self.config.seed)?;
        let mut scratch = ds.clone();
        ds.meta.input_stats = Some(normalize_inputs(&mut scratch, &split.train)?);
        ds.save(&self.path(DATASET_DIR))?;
        self.record_time("generate", start)?;
        Ok(ds)
    }

    /// Loads the dataset with inputs standardized, ready for training.
    pub fn load_training_data(&self) -> Result<Dataset<f32>, PipelineError> {
        let dir = self.path(DATASET_DIR);
        if !dir.join("meta.json").exists() {
            return Err(PipelineError::NotFound(format!("dataset not found at {}", dir.display())));
        }
        let mut ds = Dataset::<f64>::load(&dir)?;
        let stats = ds.meta.input_stats.clone().ok_or(NnError::MissingStats)?;
        let w = ds.row_len();
        for row in ds.inputs.chunks_mut(w) {
            stats.apply(row);
        }
        Ok(ds.cast())
    }

    fn train_one(
        &self,
        mut net: Network<f32>,
        ds: &Dataset<f32>,
        checkpoint: &str,
        report_name: &str,
        loss_name: &str,
    ) -> Result<TrainingReport, PipelineError> {
        let split = ds
            .meta
            .split
            .clone()
            .ok_or_else(|| PipelineError::NotFound("dataset has no split".into()))?;
        let report = self.in_pool(|| train(&mut net, ds, &split, &self.config.train))??;
        save_checkpoint(&self.path(checkpoint), &net, Some(&ds.meta))?;
        write_json(&self.path(report_name), &report)?;
        write_text(&self.path(loss_name), &report.loss_csv())?;
        Ok(report)
    }

    /// Trains the CNN, and the dense baseline when configured.
    pub fn train(&self) -> Result<TrainOutcome, PipelineError> {
        let start = Instant::now();
        self.ensure_out()?;
        let ds = self.load_training_data()?;
        let (c, m, k, seed) = (ds.meta.channels.len(), ds.m(), ds.k(), self.config.train.seed);
        let cnn = self.train_one(build_cnn(c, m, k, seed)?, &ds, CNN_CHECKPOINT, TRAINING_CNN, LOSS_CNN_CSV)?;
        let mlp = if self.config.baseline {
            Some(self.train_one(build_mlp(c, m, k, seed)?, &ds, MLP_CHECKPOINT, TRAINING_MLP, LOSS_MLP_CSV)?)
        } else {
            None
        };
        if !self.config.baseline {
            for stale in [MLP_CHECKPOINT, TRAINING_MLP, LOSS_MLP_CSV] {
                let _ = fs::remove_file(self.path(stale));
            }
        }

        let epochs = |r: &TrainingReport| (1..=r.epochs_run).map(|e| e as f64).collect::<Vec<_>>();
        let (ce, ct, cv) = (epochs(&cnn), cnn.normalized_train_loss(), cnn.normalized_val_loss());
        let mut series = vec![
            svg::Series { label: "CNN train", x: &ce, y: &ct, dashed: true },
            svg::Series { label: "CNN validation", x: &ce, y: &cv, dashed: false },
        ];
        let mlp_curves = mlp.as_ref().map(|r| (epochs(r), r.normalized_train_loss(), r.normalized_val_loss()));
        if let Some((me, mt, mv)) = &mlp_curves {
            series.push(svg::Series { label: "MLP train", x: me, y: mt, dashed: true });
            series.push(svg::Series { label: "MLP validation", x: me, y: mv, dashed: false });
        }
        write_text(
            &self.path(LOSS_SVG),
            &svg::line_plot("Normalized RMS loss", "epoch", "loss / initial validation loss", &series, true),
        )?;
        self.record_time("train", start)?;
        Ok(TrainOutcome { cnn, mlp })
    }

    fn load_network(&self, name: &str) -> Result<(Network<f32>, crate::datagen::DatasetMeta), PipelineError> {
        let path = self.path(name);
        if !path.exists() {
            return Err(PipelineError::NotFound(format!("checkpoint not found: {}", path.display())));
        }
        let (net, meta) = load_checkpoint::<f32>(&path)?;
        let meta = meta.ok_or_else(|| PipelineError::NotFound(format!("{}: no dataset meta", path.display())))?;
        Ok((net, meta))
    }

    fn estimate(&self, name: &str, event: &Trajectory<f64>) -> Result<Prediction, PipelineError> {
        let (net, meta) = self.load_network(name)?;
        let features: Vec<f32> = deviation_features(event)?.iter().map(|v| *v as f32).collect();
        if features.len() != net.input_size() {
            return Err(DatagenError::WaveformLength {
                expected: net.input_size(),
                got: features.len(),
            }
            .into());
        }
        Ok(predict(&net, &features, &meta)?)
    }

    /// Estimates the parameters from the measured event and replays the
    /// event with them.
    pub fn predict(&self) -> Result<CalibrationReport, PipelineError> {
        let start = Instant::now();
        self.ensure_out()?;
        let event = self.event()?;
        let cnn = self.estimate(CNN_CHECKPOINT, &event)?;
        let mlp = if self.config.baseline && self.path(MLP_CHECKPOINT).exists() {
            Some(self.estimate(MLP_CHECKPOINT, &event)?)
        } else {
            None
        };
        let model = self.model()?;
        let opts = PlaybackOptions::default();
        let pre_sim = playback(&model, &Assignment::new(), &event, &opts)?;
        let pre = mismatch(&pre_sim, &event)?;

        let assignment = |p: &Prediction| -> Assignment<f64> {
            p.names.iter().cloned().zip(p.values.iter().copied()).collect()
        };
        let (post, post_error) = match playback(&model, &assignment(&cnn), &event, &opts) {
            Ok(sim) => {
                self.write_comparison(&event, &sim, COMPARISON_POST_CSV, COMPARISON_POST_SVG, "Event playback after calibration")?;
                (Some(mismatch(&sim, &event)?), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        let post_mlp = match &mlp {
            Some(p) => playback(&model, &assignment(p), &event, &opts)
                .ok()
                .map(|sim| mismatch(&sim, &event))
                .transpose()?,
            None => None,
        };

        let sensitivity = if self.path(SENSITIVITY_JSON).exists() {
            read_json::<SensitivityResult<f64>>(&self.path(SENSITIVITY_JSON))?.results
        } else {
            Vec::new()
        };
        let parameters = cnn
            .names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                Ok(ParameterRow {
                    name: name.clone(),
                    original: model.params().value(name)?,
                    cnn: cnn.values[i],
                    cnn_clamped: cnn.clamped[i],
                    mlp: mlp.as_ref().and_then(|m| m.get(name)),
                    mlp_clamped: mlp
                        .as_ref()
                        .and_then(|m| m.names.iter().position(|n| n == name).map(|j| m.clamped[j])),
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;

        let mut artifacts = vec![
            VALIDATION_PRE, COMPARISON_PRE_CSV, COMPARISON_PRE_SVG, SENSITIVITY_JSON, DATASET_DIR, CNN_CHECKPOINT,
            TRAINING_CNN, LOSS_CNN_CSV, LOSS_SVG,
        ];
        if mlp.is_some() {
            artifacts.extend([MLP_CHECKPOINT, TRAINING_MLP, LOSS_MLP_CSV]);
        }
        if post.is_some() {
            artifacts.extend([COMPARISON_POST_CSV, COMPARISON_POST_SVG]);
        }
        let artifacts = artifacts
            .into_iter()
            .filter(|a| self.path(a).exists())
            .map(String::from)
            .collect();
        let report = CalibrationReport {
            event: self.event_name(),
            mismatch_threshold: self.config.mismatch_threshold,
            pre_needs_calibration: needs_calibration(&pre, self.config.mismatch_threshold),
            pre,
            sensitivity,
            calibrated: cnn.names.clone(),
            parameters,
            post_needs_calibration: post.map(|s| needs_calibration(&s, self.config.mismatch_threshold)),
            improvement_ratio: post.map(|s| s.combined / pre.combined),
            post,
            post_error,
            post_mlp,
            artifacts,
            timings: TIMINGS.into(),
        };
        write_json(&self.path(CALIBRATION_REPORT), &report)?;
        self.record_time("predict", start)?;
        Ok(report)
    }

    /// Writes `summary.md` from the artifacts in the output directory.
    pub fn report(&self) -> Result<String, PipelineError> {
        let text = render_summary(self.out())?;
        write_text(&self.path(SUMMARY), &text)?;
        Ok(text)
    }

    /// All stages in order.
    pub fn run(&self) -> Result<CalibrationReport, PipelineError> {
        self.validate()?;
        self.sensitivity()?;
        self.generate()?;
        self.train()?;
        let report = self.predict()?;
        self.report()?;
        Ok(report)
    }
}
