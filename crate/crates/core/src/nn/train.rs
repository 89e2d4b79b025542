use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Split};
use crate::num::Real;

use super::layers::Mode;
use super::network::Network;
use super::optim::Adam;
use super::NnError;

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;
const DROPOUT_SALT: u64 = 0x4452_4f50_4f55_5431;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: usize,
    /// Learning rate multiplier applied after `lr_decay_patience` epochs
    /// without improvement. 1 disables the schedule.
    pub lr_decay_factor: f64,
    pub lr_decay_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            dropout_rate: 0.2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 20,
            lr_decay_factor: 0.5,
            lr_decay_patience: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decays must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if self.patience == 0 || self.lr_decay_patience == 0 {
            return bad("patience values must be at least 1");
        }
        Ok(())
    }
}

/// Absolute error statistics for one parameter, in percent of its base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub name: String,
    pub mean_abs_pct: f64,
    pub max_abs_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub n: usize,
    /// RMS error on normalized targets, predictions unclamped.
    pub rms: f64,
    pub params: Vec<ParamError>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub n_params: usize,
    /// Raw per-epoch RMS losses; dropout active for training, inactive for validation.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Validation loss of the initial weights; curves are reported relative to it.
    pub loss_normalizer: f64,
    /// 1-based epoch whose weights were retained.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_learning_rate: f64,
    pub test: Option<TestMetrics>,
    /// Excluded from serialization and comparison.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PartialEq for TrainingReport {
    fn eq(&self, other: &Self) -> bool {
        self.n_params == other.n_params
            && self.train_loss == other.train_loss
            && self.val_loss == other.val_loss
            && self.loss_normalizer == other.loss_normalizer
            && self.best_epoch == other.best_epoch
            && self.best_val_loss == other.best_val_loss
            && self.epochs_run == other.epochs_run
            && self.stopped_early == other.stopped_early
            && self.final_learning_rate == other.final_learning_rate
            && self.test == other.test
    }
}

impl TrainingReport {
    pub fn normalized_train_loss(&self) -> Vec<f64> {
        self.train_loss.iter().map(|v| v / self.loss_normalizer).collect()
    }

    pub fn normalized_val_loss(&self) -> Vec<f64> {
        self.val_loss.iter().map(|v| v / self.loss_normalizer).collect()
    }

    /// `epoch,train,val` rows of normalized losses.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.normalized_train_loss().iter().zip(self.normalized_val_loss()).enumerate() {
            out.push_str(&format!("{},{t},{v}\n", i + 1));
        }
        out
    }
}

fn dropout_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let key = (seed ^ DROPOUT_SALT).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index as u64);
    rng
}

fn check_dataset<T: Real>(net: &Network<T>, ds: &Dataset<T>, split: &Split) -> Result<(), NnError> {
    if ds.meta.input_stats.is_none() {
        return Err(NnError::MissingStats);
    }
    if ds.row_len() != net.input_size() {
        return Err(NnError::ShapeMismatch(format!(
            "dataset rows have {} values, network expects {}",
            ds.row_len(),
            net.input_size()
        )));
    }
    if ds.k() != net.n_outputs() {
        return Err(NnError::ShapeMismatch(format!(
            "dataset has {} targets, network has {} outputs",
            ds.k(),
            net.n_outputs()
        )));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(NnError::Dataset("training and validation sets must be non-empty".into()));
    }
    let n = ds.n();
    if split.train.iter().chain(&split.val).chain(&split.test).any(|i| *i >= n) {
        return Err(NnError::Dataset("split index out of range".into()));
    }
    Ok(())
}

/// Eval-mode predictions for the given rows, `k` values each.
fn predict_rows<T: Real>(net: &Network<T>, ds: &Dataset<T>, rows: &[usize]) -> Result<Vec<Vec<T>>, NnError> {
    rows.par_iter().map(|&i| net.infer(ds.input(i))).collect()
}

fn rms_over<T: Real>(net: &Network<T>, ds: &Dataset<T>, rows: &[usize]) -> Result<f64, NnError> {
    let preds = predict_rows(net, ds, rows)?;
    let mut sq = 0.0;
    for (p, &i) in preds.iter().zip(rows) {
        for (a, b) in p.iter().zip(ds.target(i)) {
            let d = (*a - *b).to_f64_lossy();
            sq += d * d;
        }
    }
    Ok((sq / (rows.len() * ds.k()) as f64).sqrt())
}

/// Per-parameter absolute errors on `rows` with predictions clamped to the
/// sampling range, in percent of each parameter's base value.
pub fn evaluate<T: Real>(net: &Network<T>, ds: &Dataset<T>, rows: &[usize]) -> Result<TestMetrics, NnError> {
    if rows.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let preds = predict_rows(net, ds, rows)?;
    let k = ds.k();
    let mut sum = vec![0.0; k];
    let mut max = vec![0.0f64; k];
    let mut sq = 0.0;
    for (p, &i) in preds.iter().zip(rows) {
        for (j, spec) in ds.meta.targets.iter().enumerate() {
            let raw = p[j].to_f64_lossy();
            let t = ds.target(i)[j].to_f64_lossy();
            sq += (raw - t) * (raw - t);
            let err = (spec.denormalize(raw.clamp(0.0, 1.0)) - spec.denormalize(t)).abs() / spec.base.abs() * 100.0;
            sum[j] += err;
            max[j] = max[j].max(err);
        }
    }
    let n = rows.len();
    Ok(TestMetrics {
        n,
        rms: (sq / (n * k) as f64).sqrt(),
        params: ds
            .meta
            .targets
            .iter()
            .enumerate()
            .map(|(j, s)| ParamError {
                name: s.name.clone(),
                mean_abs_pct: sum[j] / n as f64,
                max_abs_pct: max[j],
            })
            .collect(),
    })
}

/// Seeded minibatch Adam on `split.train`, keeping the weights with the
/// lowest validation loss.
pub fn train<T: Real>(
    net: &mut Network<T>,
    ds: &Dataset<T>,
    split: &Split,
    config: &TrainConfig,
) -> Result<TrainingReport, NnError> {
    train_with(net, ds, split, config, |_, _, _| {})
}

/// As [`train`], calling `on_epoch(epoch, train_loss, val_loss)` after every epoch.
pub fn train_with<T: Real>(
    net: &mut Network<T>,
    ds: &Dataset<T>,
    split: &Split,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<TrainingReport, NnError> {
    let start = Instant::now();
    config.validate()?;
    check_dataset(net, ds, split)?;
    net.set_dropout(config.dropout_rate)?;

    let k = ds.k();
    let mut adam = Adam::new(net.n_params(), config.learning_rate, config.beta1, config.beta2, config.epsilon);
    let initial = rms_over(net, ds, &split.val)?;
    let normalizer = if initial > 0.0 { initial } else { 1.0 };

    let mut order = split.train.clone();
    let mut buffers = Vec::new();
    let mut train_loss = Vec::new();
    let mut val_loss = Vec::new();
    let mut best = (f64::INFINITY, 0, net.params().to_vec());
    let (mut since_best, mut since_decay) = (0, 0);
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
        shuffle.set_stream(epoch as u64);
        order.copy_from_slice(&split.train);
        order.shuffle(&mut shuffle);

        let mut sq = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let xs: Vec<&[T]> = chunk.iter().map(|&i| ds.input(i)).collect();
            let ts: Vec<&[T]> = chunk.iter().map(|&i| ds.target(i)).collect();
            let rngs = chunk.iter().map(|&i| dropout_rng(config.seed, epoch, i)).collect();
            let (loss, batch_sq, grad) = net.batch_gradient(&xs, &ts, Mode::Train, Some(rngs), &mut buffers)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteLoss { epoch, batch: b });
            }
            sq += batch_sq.to_f64_lossy();
            adam.update(net.params_mut(), &grad);
        }
        let tl = (sq / (order.len() * k) as f64).sqrt();
        let vl = rms_over(net, ds, &split.val)?;
        if !vl.is_finite() {
            return Err(NnError::NonFiniteLoss { epoch, batch: 0 });
        }
        train_loss.push(tl);
        val_loss.push(vl);
        on_epoch(epoch, tl / normalizer, vl / normalizer);

        if vl < best.0 {
            best = (vl, epoch, net.params().to_vec());
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
            if since_decay >= config.lr_decay_patience {
                adam.lr *= config.lr_decay_factor;
                since_decay = 0;
            }
            if since_best >= config.patience {
                stopped_early = epoch < config.epochs;
                break;
            }
        }
    }
    net.params_mut().copy_from_slice(&best.2);
    net.set_mode(Mode::Eval);
    let test = if split.test.is_empty() {
        None
    } else {
        Some(evaluate(net, ds, &split.test)?)
    };
    Ok(TrainingReport {
        n_params: net.n_params(),
        epochs_run: train_loss.len(),
        train_loss,
        val_loss,
        loss_normalizer: normalizer,
        best_epoch: best.1,
        best_val_loss: best.0,
        stopped_early,
        final_learning_rate: adam.lr,
        test,
        wall_time: start.elapsed(),
    })
}
