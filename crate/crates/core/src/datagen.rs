//! Labelled training data from randomly perturbed playback simulations.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockdyn::{Assignment, ParameterSet, UnitModel};
use crate::num::Real;
use crate::playback::{playback, PlaybackError, PlaybackOptions, Trajectory};

/// Input channels: deviation of P and Q from their first sample.
pub const CHANNELS: [&str; 2] = ["dP", "dQ"];
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.81, 0.09, 0.10);
pub const DEFAULT_MAX_RETRIES: usize = 10;
const NOISE_STREAM_SALT: u64 = 0x6e6f_6973_655f_7264;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("no parameters selected")]
    NoParameters,
    #[error("unknown parameter \"{0}\"")]
    UnknownParameter(String),
    #[error("sample count must be at least 1")]
    EmptyRequest,
    #[error("invalid noise standard deviation {0}")]
    InvalidNoise(f64),
    #[error("sample {index}: {attempts} attempts failed, last assignment {assignment:?}: {source}")]
    RetriesExhausted {
        index: usize,
        attempts: usize,
        assignment: Vec<(String, f64)>,
        #[source]
        source: PlaybackError,
    },
    #[error("split ratios must be positive and sum to 1 (got {0:?})")]
    InvalidRatios((f64, f64, f64)),
    #[error("dataset needs at least 3 rows to split, has {0}")]
    TooSmallToSplit(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("waveform length {got} does not match dataset length {expected}")]
    WaveformLength { expected: usize, got: usize },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

/// Perturbation range of one calibrated parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    pub base: f64,
    pub lower_factor: f64,
    pub upper_factor: f64,
}

impl TargetSpec {
    pub fn normalize<T: Real>(&self, value: T) -> T {
        let span = self.upper_factor - self.lower_factor;
        if span == 0.0 {
            return T::zero();
        }
        (value / T::lit(self.base) - T::lit(self.lower_factor)) / T::lit(span)
    }

    pub fn denormalize<T: Real>(&self, t: T) -> T {
        let span = self.upper_factor - self.lower_factor;
        T::lit(self.base) * (T::lit(self.lower_factor) + t * T::lit(span))
    }
}

pub fn target_specs<T: Real>(base: &ParameterSet<T>, names: &[String]) -> Result<Vec<TargetSpec>, DatagenError> {
    if names.is_empty() {
        return Err(DatagenError::NoParameters);
    }
    names
        .iter()
        .map(|n| {
            let e = base.get(n).ok_or_else(|| DatagenError::UnknownParameter(n.clone()))?;
            Ok(TargetSpec {
                name: n.clone(),
                base: e.base_value.to_f64_lossy(),
                lower_factor: e.lower_factor.to_f64_lossy(),
                upper_factor: e.upper_factor.to_f64_lossy(),
            })
        })
        .collect()
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw<T: Real>(specs: &[TargetSpec], rng: &mut ChaCha8Rng) -> Assignment<T> {
    specs
        .iter()
        .map(|s| {
            let u: f64 = rng.random();
            let factor = s.lower_factor + (s.upper_factor - s.lower_factor) * u;
            (s.name.clone(), T::lit(s.base * factor))
        })
        .collect()
}

/// Draw for sample `index`: each named parameter uniform over
/// `[lower_factor * base, upper_factor * base]`, a pure function of
/// `(seed, index)`. Unnamed parameters are not part of the assignment.
pub fn sample_parameters<T: Real>(
    base: &ParameterSet<T>,
    names: &[String],
    seed: u64,
    index: usize,
) -> Result<Assignment<T>, DatagenError> {
    let specs = target_specs(base, names)?;
    Ok(draw(&specs, &mut sample_rng(seed, index)))
}

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels with zero variance, left unscaled.
    pub flagged: Vec<usize>,
}

impl InputStats {
    /// Standardizes one `channels x m` waveform in place.
    pub fn apply<T: Real>(&self, x: &mut [T]) {
        let m = x.len() / self.mean.len();
        for (c, chunk) in x.chunks_mut(m).enumerate() {
            let (mu, sd) = (T::lit(self.mean[c]), T::lit(self.std[c]));
            chunk.iter_mut().for_each(|v| *v = (*v - mu) / sd);
        }
    }

    pub fn invert<T: Real>(&self, x: &mut [T]) {
        let m = x.len() / self.mean.len();
        for (c, chunk) in x.chunks_mut(m).enumerate() {
            let (mu, sd) = (T::lit(self.mean[c]), T::lit(self.std[c]));
            chunk.iter_mut().for_each(|v| *v = *v * sd + mu);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub targets: Vec<TargetSpec>,
    pub seed: u64,
    pub noise_std: f64,
    pub event_id: String,
    pub channels: Vec<String>,
    pub n: usize,
    pub m: usize,
    pub input_stats: Option<InputStats>,
    pub split: Option<Split>,
}

/// `n` rows of `2 x m` input waveforms (row-major, channel-major within a
/// row) with `k` normalized targets each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Vec<T>,
    pub targets: Vec<T>,
    pub meta: DatasetMeta,
}

impl<T: Real> Dataset<T> {
    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn m(&self) -> usize {
        self.meta.m
    }

    pub fn k(&self) -> usize {
        self.meta.targets.len()
    }

    pub fn row_len(&self) -> usize {
        CHANNELS.len() * self.meta.m
    }

    pub fn input(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.inputs[i * w..(i + 1) * w]
    }

    pub fn target(&self, i: usize) -> &[T] {
        let k = self.k();
        &self.targets[i * k..(i + 1) * k]
    }

    pub fn names(&self) -> Vec<String> {
        self.meta.targets.iter().map(|t| t.name.clone()).collect()
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect();
        Dataset {
            inputs: c(&self.inputs),
            targets: c(&self.targets),
            meta: self.meta.clone(),
        }
    }

    /// Denormalized parameter values of row `i`.
    pub fn target_values(&self, i: usize) -> Vec<T> {
        self.meta
            .targets
            .iter()
            .zip(self.target(i))
            .map(|(s, t)| s.denormalize(*t))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub n: usize,
    pub seed: u64,
    pub noise_std: f64,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    pub max_retries: usize,
    pub event_id: String,
    pub playback: PlaybackOptions,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            n: 2000,
            seed: 0,
            noise_std: 0.0,
            workers: 0,
            max_retries: DEFAULT_MAX_RETRIES,
            event_id: "event".into(),
            playback: PlaybackOptions::default(),
        }
    }
}

/// Deviation waveform `[P - P0 ..., Q - Q0 ...]` of a simulated trajectory.
pub fn deviation_features<T: Real>(traj: &Trajectory<T>) -> Result<Vec<T>, PlaybackError> {
    let p = traj.p.as_ref().ok_or(PlaybackError::MissingChannel("P"))?;
    let q = traj.q.as_ref().ok_or(PlaybackError::MissingChannel("Q"))?;
    Ok(p.iter()
        .map(|v| *v - p[0])
        .chain(q.iter().map(|v| *v - q[0]))
        .collect())
}

fn generate_row<T: Real>(
    model: &UnitModel<T>,
    event: &Trajectory<T>,
    specs: &[TargetSpec],
    opts: &GenerateOptions,
    index: usize,
) -> Result<(Vec<T>, Vec<T>), DatagenError> {
    let mut rng = sample_rng(opts.seed, index);
    let mut attempt = 0;
    let (assignment, mut features) = loop {
        attempt += 1;
        let a = draw::<T>(specs, &mut rng);
        match playback(model, &a, event, &opts.playback).and_then(|t| deviation_features(&t)) {
            Ok(f) => break (a, f),
            Err(source) if attempt > opts.max_retries => {
                return Err(DatagenError::RetriesExhausted {
                    index,
                    attempts: attempt,
                    assignment: a.iter().map(|(k, v)| (k.clone(), v.to_f64_lossy())).collect(),
                    source,
                })
            }
            Err(_) => continue,
        }
    };
    if opts.noise_std > 0.0 {
        let mut nrng = ChaCha8Rng::seed_from_u64(opts.seed ^ NOISE_STREAM_SALT);
        nrng.set_stream(index as u64);
        let normal = Normal::new(0.0, opts.noise_std).expect("validated noise level");
        for v in features.iter_mut() {
            *v = *v + T::lit(normal.sample(&mut nrng));
        }
    }
    let targets = specs.iter().map(|s| s.normalize(assignment[&s.name])).collect();
    Ok((features, targets))
}

/// Runs one playback per sample with freshly drawn parameters. Rows are
/// produced in index order whatever the worker count. If the event carries
/// power channels, their first samples set the initial operating point.
pub fn generate_dataset<T: Real>(
    model: &UnitModel<T>,
    event: &Trajectory<T>,
    names: &[String],
    opts: &GenerateOptions,
) -> Result<Dataset<T>, DatagenError> {
    if opts.n == 0 {
        return Err(DatagenError::EmptyRequest);
    }
    if !(opts.noise_std >= 0.0) || !opts.noise_std.is_finite() {
        return Err(DatagenError::InvalidNoise(opts.noise_std));
    }
    let specs = target_specs(model.params(), names)?;
    let event = event.clone();
    let run = || -> Vec<Result<(Vec<T>, Vec<T>), DatagenError>> {
        (0..opts.n)
            .into_par_iter()
            .map(|i| generate_row(model, &event, &specs, opts, i))
            .collect()
    };
    let rows = if opts.workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| DatagenError::Pool(e.to_string()))?
            .install(run)
    };

    let m = event.len();
    let mut inputs = Vec::with_capacity(opts.n * 2 * m);
    let mut targets = Vec::with_capacity(opts.n * specs.len());
    for row in rows {
        let (f, t) = row?;
        inputs.extend(f);
        targets.extend(t);
    }
    Ok(Dataset {
        inputs,
        targets,
        meta: DatasetMeta {
            targets: specs,
            seed: opts.seed,
            noise_std: opts.noise_std,
            event_id: opts.event_id.clone(),
            channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
            n: opts.n,
            m,
            input_stats: None,
            split: None,
        },
    })
}

/// Shuffles row indices with `seed` and cuts them into train/val/test.
/// The first two sizes are `round(n * ratio)`, the test split takes the rest,
/// and every split keeps at least one row.
pub fn split_indices(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Split, DatagenError> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(DatagenError::InvalidRatios(ratios));
    }
    if n < 3 {
        return Err(DatagenError::TooSmallToSplit(n));
    }
    let mut n_train = ((n as f64) * a).round() as usize;
    let mut n_val = ((n as f64) * b).round() as usize;
    n_train = n_train.clamp(1, n - 2);
    n_val = n_val.clamp(1, n - 1 - n_train);

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

pub fn split_dataset<T: Real>(ds: &mut Dataset<T>, ratios: (f64, f64, f64), seed: u64) -> Result<Split, DatagenError> {
    let split = split_indices(ds.n(), ratios, seed)?;
    ds.meta.split = Some(split.clone());
    Ok(split)
}

/// Standardizes every row with per-channel statistics of the `train` rows
/// and stores them in the metadata.
pub fn normalize_inputs<T: Real>(ds: &mut Dataset<T>, train: &[usize]) -> Result<InputStats, DatagenError> {
    if ds.n() == 0 || train.is_empty() {
        return Err(DatagenError::EmptyDataset);
    }
    let m = ds.m();
    let mut mean = Vec::new();
    let mut std = Vec::new();
    let mut flagged = Vec::new();
    for c in 0..CHANNELS.len() {
        let values: Vec<f64> = train
            .iter()
            .flat_map(|&i| ds.input(i)[c * m..(c + 1) * m].iter().map(|v| v.to_f64_lossy()))
            .collect();
        let count = values.len() as f64;
        let mu = values.iter().sum::<f64>() / count;
        let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
        let mut sd = var.sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            flagged.push(c);
            sd = 1.0;
        }
        mean.push(mu);
        std.push(sd);
    }
    let stats = InputStats { mean, std, flagged };
    let w = ds.row_len();
    for row in ds.inputs.chunks_mut(w) {
        stats.apply(row);
    }
    ds.meta.input_stats = Some(stats.clone());
    Ok(stats)
}

fn write_matrix<T: Real>(path: &Path, header: &[String], data: &[T], width: usize) -> Result<(), DatagenError> {
    let mut wr = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
    wr.write_record(header)?;
    for row in data.chunks(width) {
        wr.write_record(row.iter().map(|v| v.to_f64_lossy().to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

fn read_matrix<T: Real>(path: &Path, width: usize) -> Result<Vec<T>, DatagenError> {
    let mut rd = csv::Reader::from_reader(BufReader::new(fs::File::open(path)?));
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() != width {
            return Err(DatagenError::Malformed(format!(
                "{}: row has {} columns, expected {width}",
                path.display(),
                rec.len()
            )));
        }
        for f in rec.iter() {
            let v: f64 = f
                .parse()
                .map_err(|_| DatagenError::Malformed(format!("{}: bad number \"{f}\"", path.display())))?;
            out.push(T::lit(v));
        }
    }
    Ok(out)
}

impl<T: Real> Dataset<T> {
    /// Writes `meta.json`, `inputs.csv` (columns `dP_0..dP_{m-1}, dQ_0..`)
    /// and `targets.csv` (one normalized column per parameter).
    pub fn save(&self, dir: &Path) -> Result<(), DatagenError> {
        fs::create_dir_all(dir)?;
        let mut meta = BufWriter::new(fs::File::create(dir.join("meta.json"))?);
        serde_json::to_writer_pretty(&mut meta, &self.meta)?;
        meta.write_all(b"\n")?;
        meta.flush()?;
        let m = self.m();
        let header: Vec<String> = CHANNELS
            .iter()
            .flat_map(|c| (0..m).map(move |k| format!("{c}_{k}")))
            .collect();
        write_matrix(&dir.join("inputs.csv"), &header, &self.inputs, self.row_len())?;
        write_matrix(&dir.join("targets.csv"), &self.names(), &self.targets, self.k())
    }

    pub fn load(dir: &Path) -> Result<Self, DatagenError> {
        let meta: DatasetMeta = serde_json::from_reader(BufReader::new(fs::File::open(dir.join("meta.json"))?))?;
        let w = CHANNELS.len() * meta.m;
        let inputs = read_matrix(&dir.join("inputs.csv"), w)?;
        let targets = read_matrix(&dir.join("targets.csv"), meta.targets.len())?;
        if inputs.len() != meta.n * w || targets.len() != meta.n * meta.targets.len() {
            return Err(DatagenError::Malformed("row count does not match meta.json".into()));
        }
        Ok(Self { inputs, targets, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        ps.push("H", 4.6, "s").unwrap();
        ps.push_with_factors("Ka", 250.0, 1.0, 1.0, "pu").unwrap();
        ps
    }

    #[test]
    fn draws_stay_in_range_and_repeat() {
        let names = vec!["H".to_string(), "Ka".to_string()];
        for i in 0..200 {
            let a = sample_parameters(&base(), &names, 7, i).unwrap();
            assert!((2.3..=9.2).contains(&a["H"]));
            assert_eq!(a["Ka"], 250.0);
            assert_eq!(a, sample_parameters(&base(), &names, 7, i).unwrap());
        }
        let a = sample_parameters(&base(), &names, 7, 0).unwrap();
        let b = sample_parameters(&base(), &names, 7, 1).unwrap();
        assert_ne!(a["H"], b["H"]);
        assert!(sample_parameters(&base(), &["nope".to_string()], 7, 0).is_err());
    }

    #[test]
    fn split_sizes_follow_rounding_rule() {
        let s = split_indices(10_000, DEFAULT_RATIOS, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8100, 900, 1000));
        let s = split_indices(10, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split_indices(3, DEFAULT_RATIOS, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
        assert_eq!(split_indices(50, DEFAULT_RATIOS, 4).unwrap(), split_indices(50, DEFAULT_RATIOS, 4).unwrap());
        assert!(split_indices(2, DEFAULT_RATIOS, 1).is_err());
        assert!(split_indices(10, (0.5, 0.5, 0.1), 1).is_err());
    }

    #[test]
    fn target_normalization_round_trips() {
        let s = TargetSpec {
            name: "Tb".into(),
            base: 43.0,
            lower_factor: 0.5,
            upper_factor: 2.0,
        };
        assert_eq!(s.normalize(21.5), 0.0);
        assert!((s.normalize(86.0) - 1.0f64).abs() < 1e-15);
        for v in [21.5f64, 30.0, 42.61, 86.0] {
            assert!((s.denormalize(s.normalize(v)) - v).abs() < 1e-12);
        }
    }

    fn toy(rows: &[[f64; 4]]) -> Dataset<f64> {
        Dataset {
            inputs: rows.iter().flatten().copied().collect(),
            targets: vec![0.5; rows.len()],
            meta: DatasetMeta {
                targets: vec![TargetSpec {
                    name: "H".into(),
                    base: 1.0,
                    lower_factor: 0.5,
                    upper_factor: 2.0,
                }],
                seed: 0,
                noise_std: 0.0,
                event_id: "toy".into(),
                channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
                n: rows.len(),
                m: 2,
                input_stats: None,
                split: None,
            },
        }
    }

    #[test]
    fn standardization_and_constant_channel_guard() {
        let mut ds = toy(&[[1.0, 2.0, 0.3, 0.3], [3.0, 5.0, 0.3, 0.3], [0.0, -1.0, 0.3, 0.3]]);
        let stats = normalize_inputs(&mut ds, &[0, 1, 2]).unwrap();
        assert_eq!(stats.flagged, vec![1]);
        assert_eq!(stats.std[1], 1.0);
        let dp: Vec<f64> = (0..3).flat_map(|i| ds.input(i)[..2].to_vec()).collect();
        let mu = dp.iter().sum::<f64>() / 6.0;
        let sd = (dp.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 6.0).sqrt();
        assert!(mu.abs() < 1e-9 && (sd - 1.0).abs() < 1e-6);

        let mut w: Vec<f64> = vec![0.7, -0.2, 0.31, 0.29];
        let orig = w.clone();
        stats.apply(&mut w);
        stats.invert(&mut w);
        for (a, b) in w.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_persists_exactly() {
        let mut ds = toy(&[[0.1, 0.2, 0.3, 0.4], [1.0 / 3.0, 2.0, -0.3, 1e-17], [5.0, 6.0, 7.0, 8.0]]);
        split_dataset(&mut ds, (0.34, 0.33, 0.33), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::<f64>::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
