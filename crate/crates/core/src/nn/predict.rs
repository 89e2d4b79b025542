use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetMeta, TargetSpec};
use crate::num::Real;

use super::network::Network;
use super::NnError;

/// Per-parameter estimates in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    /// Branch outputs before clamping.
    pub raw: Vec<f64>,
    /// Set where the raw output fell outside the sampling range.
    pub clamped: Vec<bool>,
}

impl Prediction {
    pub fn from_raw(targets: &[TargetSpec], raw: &[f64]) -> Self {
        let mut values = Vec::with_capacity(raw.len());
        let mut clamped = Vec::with_capacity(raw.len());
        for (spec, r) in targets.iter().zip(raw) {
            let c = r.clamp(0.0, 1.0);
            clamped.push(c != *r);
            values.push(spec.denormalize(c));
        }
        Self {
            names: targets.iter().map(|t| t.name.clone()).collect(),
            values,
            raw: raw.to_vec(),
            clamped,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Predicts from a waveform already standardized with the dataset statistics.
pub fn predict_normalized<T: Real>(net: &Network<T>, x: &[T], meta: &DatasetMeta) -> Result<Prediction, NnError> {
    if meta.targets.len() != net.n_outputs() {
        return Err(NnError::ShapeMismatch(format!(
            "meta lists {} targets, network has {} outputs",
            meta.targets.len(),
            net.n_outputs()
        )));
    }
    let out = net.infer(x)?;
    let raw: Vec<f64> = out.iter().map(|v| v.to_f64_lossy()).collect();
    Ok(Prediction::from_raw(&meta.targets, &raw))
}

/// Standardizes a raw deviation waveform with the stored statistics and predicts.
pub fn predict<T: Real>(net: &Network<T>, waveform: &[T], meta: &DatasetMeta) -> Result<Prediction, NnError> {
    let stats = meta.input_stats.as_ref().ok_or(NnError::MissingStats)?;
    let mut x = waveform.to_vec();
    if x.len() != net.input_size() {
        return Err(NnError::ShapeMismatch(format!(
            "waveform has {} values, network expects {}",
            x.len(),
            net.input_size()
        )));
    }
    stats.apply(&mut x);
    predict_normalized(net, &x, meta)
}
