use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::DEFAULT_RATIOS;
use crate::nn::TrainConfig;
use crate::playback::DEFAULT_MISMATCH_THRESHOLD;
use crate::sensitivity::{DEFAULT_DELTA_FRACTION, DEFAULT_KEEP_RATIO};

use super::PipelineError;

pub const DEFAULT_CANDIDATES: [&str; 4] = ["H", "Ka", "Tb", "Ks"];

/// Settings for all pipeline stages. Relative paths are resolved against
/// the directory of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Model configuration JSON; built-in defaults when absent.
    pub model: Option<PathBuf>,
    /// Event CSV with `t,vmag,vang,p,q`.
    pub event: Option<PathBuf>,
    /// Parameter values applied on top of the model configuration.
    pub overrides: BTreeMap<String, f64>,
    /// Parameters screened by sensitivity.
    pub candidates: Vec<String>,
    /// Calibrate exactly these instead of the screening selection.
    pub parameters: Option<Vec<String>>,
    pub n: usize,
    /// Seed for sampling and the data split.
    pub seed: u64,
    pub noise_std: f64,
    pub split: [f64; 3],
    pub train: TrainConfig,
    /// Also train the dense baseline.
    pub baseline: bool,
    pub mismatch_threshold: f64,
    pub keep_ratio: f64,
    pub delta_fraction: f64,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: None,
            event: None,
            overrides: BTreeMap::new(),
            candidates: DEFAULT_CANDIDATES.iter().map(|s| s.to_string()).collect(),
            parameters: None,
            n: 2000,
            seed: 0,
            noise_std: 0.0,
            split: [DEFAULT_RATIOS.0, DEFAULT_RATIOS.1, DEFAULT_RATIOS.2],
            train: TrainConfig::default(),
            baseline: false,
            mismatch_threshold: DEFAULT_MISMATCH_THRESHOLD,
            keep_ratio: DEFAULT_KEEP_RATIO,
            delta_fraction: DEFAULT_DELTA_FRACTION,
            workers: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.model.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.event.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.out);
        Ok(cfg)
    }

    /// Checks value ranges and that referenced files exist.
    pub fn check(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if !(self.mismatch_threshold > 0.0) {
            return bad("mismatch_threshold must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative".into());
        }
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        for p in [&self.model, &self.event].into_iter().flatten() {
            if !p.exists() {
                return bad(format!("{}: file not found", p.display()));
            }
        }
        Ok(())
    }

    pub fn event_path(&self) -> Result<&Path, PipelineError> {
        self.event
            .as_deref()
            .ok_or_else(|| PipelineError::Config("no event file configured".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("ev.csv"), "t,vmag,vang\n").unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"event": "ev.csv", "n": 10, "train": {"epochs": 3}}"#).unwrap();
        let cfg = PipelineConfig::from_path(&path).unwrap();
        assert_eq!(cfg.n, 10);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.event.as_deref(), Some(dir.path().join("ev.csv").as_path()));
        assert_eq!(cfg.out, dir.path().join("out"));
        cfg.check().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let cfg = PipelineConfig {
            n: 0,
            ..Default::default()
        };
        assert!(cfg.check().is_err());
        let cfg = PipelineConfig {
            event: Some("/nonexistent/event.csv".into()),
            ..Default::default()
        };
        assert!(cfg.check().is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        assert!(PipelineConfig::from_path(&path).is_err());
    }
}
