//! Event playback: drive the unit with a recorded terminal voltage phasor and
//! compare the simulated power output against the recorded one.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::blockdyn::{
    init_equilibrium, Assignment, Inputs, ModelError, SimState, UnitModel,
};
use crate::blockdyn::integrate::{advance, Rk4Workspace};
use crate::num::Real;

pub const DEFAULT_SUBSTEP: f64 = 1.0 / 240.0;
pub const DEFAULT_MISMATCH_THRESHOLD: f64 = 0.02;
pub const NRMSE_EPSILON: f64 = 1e-9;
/// Allowed deviation of any sample interval from the median interval.
pub const UNIFORMITY_TOLERANCE: f64 = 0.01;
pub const ALIGNMENT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PlaybackError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column \"{0}\"")]
    MissingColumn(String),
    #[error("unexpected column \"{0}\"")]
    UnknownColumn(String),
    #[error("row {row}: cannot parse {column} value \"{value}\"")]
    Parse { row: usize, column: String, value: String },
    #[error("row {row}: NaN sample in column {column}")]
    NanSample { row: usize, column: String },
    #[error("row {row}: non-monotonic time")]
    NonMonotonic { row: usize },
    #[error("row {row}: non-uniform sampling (interval {interval}, median {median})")]
    NonUniform { row: usize, interval: f64, median: f64 },
    #[error("row {row}: terminal voltage magnitude must be positive")]
    NonPositiveVoltage { row: usize },
    #[error("trajectory needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("channel {channel} has length {got}, expected {expected}")]
    ChannelLength { channel: &'static str, expected: usize, got: usize },
    #[error("invalid sample interval {0}")]
    InvalidInterval(f64),
    #[error("trajectories differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("timestamps are not aligned (offset {0} s)")]
    Misaligned(f64),
    #[error("missing {0} channel")]
    MissingChannel(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Uniformly sampled terminal measurements.
///
/// `vang` is stored unwrapped. `p` and `q` are present for measured or
/// simulated records and absent for pure voltage excitations.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub t0: T,
    pub dt_sample: T,
    pub vmag: Vec<T>,
    pub vang: Vec<T>,
    pub p: Option<Vec<T>>,
    pub q: Option<Vec<T>>,
}

impl<T: Real> Trajectory<T> {
    /// Voltage-only trajectory. The angle is unwrapped on construction.
    pub fn new(t0: T, dt_sample: T, vmag: Vec<T>, vang: Vec<T>) -> Result<Self, PlaybackError> {
        if !(dt_sample > T::zero()) || !dt_sample.is_finite() {
            return Err(PlaybackError::InvalidInterval(dt_sample.to_f64_lossy()));
        }
        let m = vmag.len();
        if m < 2 {
            return Err(PlaybackError::TooShort(m));
        }
        if vang.len() != m {
            return Err(PlaybackError::ChannelLength {
                channel: "vang",
                expected: m,
                got: vang.len(),
            });
        }
        for (row, v) in vmag.iter().enumerate() {
            if v.is_nan() {
                return Err(PlaybackError::NanSample {
                    row,
                    column: "vmag".into(),
                });
            }
            if !(*v > T::zero()) {
                return Err(PlaybackError::NonPositiveVoltage { row });
            }
        }
        if let Some(row) = vang.iter().position(|a| !a.is_finite()) {
            return Err(PlaybackError::NanSample {
                row,
                column: "vang".into(),
            });
        }
        Ok(Self {
            t0,
            dt_sample,
            vmag,
            vang: unwrap_angles(&vang),
            p: None,
            q: None,
        })
    }

    pub fn with_power(mut self, p: Vec<T>, q: Vec<T>) -> Result<Self, PlaybackError> {
        self.p = Some(self.checked_channel("p", p)?);
        self.q = Some(self.checked_channel("q", q)?);
        Ok(self)
    }

    fn checked_channel(&self, channel: &'static str, v: Vec<T>) -> Result<Vec<T>, PlaybackError> {
        if v.len() != self.len() {
            return Err(PlaybackError::ChannelLength {
                channel,
                expected: self.len(),
                got: v.len(),
            });
        }
        if let Some(row) = v.iter().position(|x| x.is_nan()) {
            return Err(PlaybackError::NanSample {
                row,
                column: channel.into(),
            });
        }
        Ok(v)
    }

    /// Constant phasor `v0∠0` with the magnitude stepped by `step_fraction`
    /// from `t_step` on. Sampled at `rate_hz` from 0 to `duration`.
    pub fn voltage_step(duration: T, rate_hz: T, t_step: T, v0: T, step_fraction: T) -> Result<Self, PlaybackError> {
        let dt = T::one() / rate_hz;
        let m = (duration * rate_hz).round().to_usize().unwrap_or(0) + 1;
        let half = dt * T::lit(1e-6);
        let vmag = (0..m)
            .map(|k| {
                let t = T::lit(k as f64) * dt;
                if t + half >= t_step {
                    v0 * (T::one() + step_fraction)
                } else {
                    v0
                }
            })
            .collect();
        Self::new(T::zero(), dt, vmag, vec![T::zero(); m])
    }

    pub fn len(&self) -> usize {
        self.vmag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vmag.is_empty()
    }

    pub fn time(&self, k: usize) -> T {
        self.t0 + T::lit(k as f64) * self.dt_sample
    }

    pub fn times(&self) -> Vec<T> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    /// Copy holding only the voltage channels.
    pub fn voltage_only(&self) -> Self {
        Self {
            p: None,
            q: None,
            ..self.clone()
        }
    }

    pub fn cast<U: Real>(&self) -> Trajectory<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect::<Vec<U>>();
        Trajectory {
            t0: U::lit(self.t0.to_f64_lossy()),
            dt_sample: U::lit(self.dt_sample.to_f64_lossy()),
            vmag: c(&self.vmag),
            vang: c(&self.vang),
            p: self.p.as_deref().map(c),
            q: self.q.as_deref().map(c),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PlaybackError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t", "vmag", "vang"];
        if self.p.is_some() {
            header.push("p");
        }
        if self.q.is_some() {
            header.push("q");
        }
        wr.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![
                self.time(k).to_f64_lossy().to_string(),
                self.vmag[k].to_f64_lossy().to_string(),
                self.vang[k].to_f64_lossy().to_string(),
            ];
            for ch in [&self.p, &self.q].into_iter().flatten() {
                row.push(ch[k].to_f64_lossy().to_string());
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), PlaybackError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Adds or removes whole turns so that adjacent samples differ by at most π.
pub fn unwrap_angles<T: Real>(angles: &[T]) -> Vec<T> {
    let pi = T::lit(PI);
    let two_pi = pi + pi;
    let mut out = Vec::with_capacity(angles.len());
    let mut offset = T::zero();
    for (k, &a) in angles.iter().enumerate() {
        if k > 0 {
            let d = a + offset - out[k - 1];
            if d > pi {
                offset = offset - two_pi * ((d + pi) / two_pi).floor();
            } else if d < -pi {
                offset = offset + two_pi * ((pi - d) / two_pi).floor();
            }
        }
        out.push(a + offset);
    }
    out
}

pub fn load_pmu_csv<T: Real>(path: &Path) -> Result<Trajectory<T>, PlaybackError> {
    read_pmu_csv(std::fs::File::open(path)?)
}

/// Parses the `t,vmag,vang[,p][,q]` schema.
pub fn read_pmu_csv<T: Real, R: Read>(reader: R) -> Result<Trajectory<T>, PlaybackError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rd.headers()?.clone();
    let known = ["t", "vmag", "vang", "p", "q"];
    let mut idx = [None; 5];
    for (i, h) in headers.iter().enumerate() {
        let h = h.to_ascii_lowercase();
        match known.iter().position(|k| *k == h) {
            Some(j) => idx[j] = Some(i),
            None => return Err(PlaybackError::UnknownColumn(h)),
        }
    }
    for j in 0..3 {
        if idx[j].is_none() {
            return Err(PlaybackError::MissingColumn(known[j].into()));
        }
    }

    let mut cols: [Vec<f64>; 5] = Default::default();
    for (row, rec) in rd.records().enumerate() {
        let rec = rec?;
        for j in 0..5 {
            let Some(i) = idx[j] else { continue };
            let raw = rec.get(i).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| PlaybackError::Parse {
                row,
                column: known[j].into(),
                value: raw.into(),
            })?;
            if v.is_nan() {
                return Err(PlaybackError::NanSample {
                    row,
                    column: known[j].into(),
                });
            }
            cols[j].push(v);
        }
    }

    let t = &cols[0];
    if t.len() < 2 {
        return Err(PlaybackError::TooShort(t.len()));
    }
    let mut intervals = Vec::with_capacity(t.len() - 1);
    for k in 1..t.len() {
        let d = t[k] - t[k - 1];
        if !(d > 0.0) {
            return Err(PlaybackError::NonMonotonic { row: k });
        }
        intervals.push(d);
    }
    let median = median(&intervals);
    for (k, d) in intervals.iter().enumerate() {
        if (d - median).abs() > UNIFORMITY_TOLERANCE * median {
            return Err(PlaybackError::NonUniform {
                row: k + 1,
                interval: *d,
                median,
            });
        }
    }
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;

    let conv = |v: &[f64]| v.iter().map(|x| T::lit(*x)).collect::<Vec<T>>();
    let mut traj = Trajectory::new(T::lit(t[0]), T::lit(dt), conv(&cols[1]), conv(&cols[2]))?;
    if idx[3].is_some() {
        traj.p = Some(conv(&cols[3]));
    }
    if idx[4].is_some() {
        traj.q = Some(conv(&cols[4]));
    }
    Ok(traj)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaybackOptions {
    /// Largest internal integration step; each sample interval is split
    /// into the fewest equal substeps not exceeding it.
    pub max_substep: f64,
}

impl Default for PlaybackOptions {
    fn default() -> Self {
        Self {
            max_substep: DEFAULT_SUBSTEP,
        }
    }
}

impl PlaybackOptions {
    pub fn substeps(&self, dt_sample: f64) -> usize {
        ((dt_sample / self.max_substep) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Simulated P and Q at the timestamps of `traj`, with `overrides` applied
/// to the model parameters.
pub fn playback<T: Real>(
    model: &UnitModel<T>,
    overrides: &Assignment<T>,
    traj: &Trajectory<T>,
    opts: &PlaybackOptions,
) -> Result<Trajectory<T>, PlaybackError> {
    let model = model.with_assignment(overrides)?;
    playback_detailed(&model, traj, opts).map(|(out, _)| out)
}

/// Playback that also returns the final simulation state.
pub fn playback_detailed<T: Real>(
    model: &UnitModel<T>,
    traj: &Trajectory<T>,
    opts: &PlaybackOptions,
) -> Result<(Trajectory<T>, SimState<T>), PlaybackError> {
    let m = traj.len();
    let (p0, q0) = match (&traj.p, &traj.q) {
        (Some(p), Some(q)) => (p[0], q[0]),
        _ => model.default_operating_point(),
    };
    let mut state = init_equilibrium(model, traj.vmag[0], traj.vang[0], p0, q0)?;

    let dt = traj.dt_sample;
    let n_sub = opts.substeps(dt.to_f64_lossy());
    let h = dt / T::lit(n_sub as f64);
    let mut ws = Rk4Workspace::new(model.dim());
    let mut p = Vec::with_capacity(m);
    let mut q = Vec::with_capacity(m);
    let (pp, qq) = model.terminal_power(&state.x, state.inputs);
    p.push(pp);
    q.push(qq);

    for k in 1..m {
        let ta = traj.time(k - 1);
        let (va, vb) = (traj.vmag[k - 1], traj.vmag[k]);
        let (aa, ab) = (traj.vang[k - 1], traj.vang[k]);
        let inputs_at = |t: T| {
            let f = ((t - ta) / dt).max(T::zero()).min(T::one());
            Inputs {
                vmag: va + (vb - va) * f,
                vang: aa + (ab - aa) * f,
            }
        };
        for s in 0..n_sub {
            let t = ta + T::lit(s as f64) * h;
            advance(model, &mut ws, &mut state.x, t, h, state.setpoints, &inputs_at)?;
        }
        state.t = traj.time(k);
        state.inputs = Inputs { vmag: vb, vang: ab };
        let (pp, qq) = model.terminal_power(&state.x, state.inputs);
        p.push(pp);
        q.push(qq);
    }

    let mut out = traj.voltage_only();
    out.p = Some(p);
    out.q = Some(q);
    Ok((out, state))
}

/// Range-normalized RMS errors of the power channels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MismatchScore {
    pub nrmse_p: f64,
    pub nrmse_q: f64,
    pub combined: f64,
}

fn nrmse<T: Real>(sim: &[T], meas: &[T]) -> f64 {
    let n = meas.len() as f64;
    let mut sse = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (s, m) in sim.iter().zip(meas) {
        let (s, m) = (s.to_f64_lossy(), m.to_f64_lossy());
        sse += (s - m) * (s - m);
        lo = lo.min(m);
        hi = hi.max(m);
    }
    (sse / n).sqrt() / (hi - lo + NRMSE_EPSILON)
}

pub fn mismatch<T: Real>(sim: &Trajectory<T>, meas: &Trajectory<T>) -> Result<MismatchScore, PlaybackError> {
    if sim.len() != meas.len() {
        return Err(PlaybackError::LengthMismatch(sim.len(), meas.len()));
    }
    let last = sim.len() - 1;
    for k in [0, last] {
        let off = (sim.time(k) - meas.time(k)).to_f64_lossy();
        if off.abs() > ALIGNMENT_TOLERANCE {
            return Err(PlaybackError::Misaligned(off));
        }
    }
    let get = |t: &Trajectory<T>, which: &'static str| -> Result<Vec<T>, PlaybackError> {
        let ch = if which == "P" { &t.p } else { &t.q };
        ch.clone().ok_or(PlaybackError::MissingChannel(which))
    };
    let nrmse_p = nrmse(&get(sim, "P")?, &get(meas, "P")?);
    let nrmse_q = nrmse(&get(sim, "Q")?, &get(meas, "Q")?);
    Ok(MismatchScore {
        nrmse_p,
        nrmse_q,
        combined: 0.5 * (nrmse_p + nrmse_q),
    })
}

pub fn needs_calibration(score: &MismatchScore, threshold: f64) -> bool {
    debug_assert!(threshold > 0.0);
    score.combined > threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdyn::{derivatives, UnitConfig};

    fn model() -> UnitModel<f64> {
        UnitModel::from_config(&UnitConfig::default()).unwrap()
    }

    fn csv_traj(body: &str) -> Result<Trajectory<f64>, PlaybackError> {
        read_pmu_csv(body.as_bytes())
    }

    #[test]
    fn parses_small_file() {
        let body = "t,vmag,vang\n0,1,0\n0.0333333333,1,0\n0.0666666667,1.01,0.01\n0.1,1,0\n";
        let tr = csv_traj(body).unwrap();
        assert_eq!(tr.len(), 4);
        assert!((tr.dt_sample - 1.0 / 30.0).abs() < 1e-9);
        assert!(tr.p.is_none());
    }

    #[test]
    fn rejects_gap_nan_and_reversal() {
        let mut body = String::from("t,vmag,vang,p,q\n");
        for k in 0..12 {
            let t = if k > 10 { (k + 1) as f64 / 30.0 } else { k as f64 / 30.0 };
            body += &format!("{t},1,0,0.8,0.2\n");
        }
        assert!(matches!(csv_traj(&body), Err(PlaybackError::NonUniform { row: 11, .. })));
        let err = csv_traj(&body).unwrap_err();
        assert!(err.to_string().contains("non-uniform sampling"));

        assert!(matches!(
            csv_traj("t,vmag,vang\n0,1,0\n0.1,NaN,0\n"),
            Err(PlaybackError::NanSample { .. })
        ));
        assert!(matches!(
            csv_traj("t,vmag,vang\n0,1,0\n-0.1,1,0\n"),
            Err(PlaybackError::NonMonotonic { row: 1 })
        ));
        assert!(matches!(
            csv_traj("t,vmag\n0,1\n0.1,1\n"),
            Err(PlaybackError::MissingColumn(_))
        ));
    }

    #[test]
    fn angle_is_unwrapped() {
        let tr = csv_traj("t,vmag,vang\n0,1,3.0\n0.1,1,3.10\n0.2,1,-3.12\n0.3,1,-3.0\n").unwrap();
        let want = -3.12 + 2.0 * PI;
        assert!((tr.vang[2] - want).abs() < 1e-12);
        assert!((tr.vang[3] - (-3.0 + 2.0 * PI)).abs() < 1e-12);
        assert!(tr.vang.windows(2).all(|w| (w[1] - w[0]).abs() <= PI));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let tr = Trajectory::new(0.5, 1.0 / 30.0, vec![1.0, 1.05, 0.99], vec![0.1, 0.2, 0.3])
            .unwrap()
            .with_power(vec![0.8, 0.81, 0.79], vec![0.2, 0.1, 0.3])
            .unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let back: Trajectory<f64> = read_pmu_csv(buf.as_slice()).unwrap();
        assert_eq!(back.vmag, tr.vmag);
        assert_eq!(back.p, tr.p);
        assert!((back.dt_sample - tr.dt_sample).abs() < 1e-12);
    }

    #[test]
    fn constant_voltage_holds_equilibrium() {
        let tr = Trajectory::new(0.0, 1.0 / 30.0, vec![1.0; 301], vec![0.0; 301]).unwrap();
        let out = playback(&model(), &Assignment::new(), &tr, &PlaybackOptions::default()).unwrap();
        for (p, q) in out.p.unwrap().iter().zip(out.q.unwrap()) {
            assert!((p - 0.8).abs() < 1e-6 && (q - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn voltage_step_settles() {
        let tr = Trajectory::voltage_step(300.0, 30.0, 1.0, 1.0, 0.05).unwrap();
        let m = model();
        let (out, last) = playback_detailed(&m, &tr, &PlaybackOptions::default()).unwrap();
        let p = out.p.unwrap();
        let peak = p.iter().map(|v| (v - 0.8).abs()).fold(0.0, f64::max);
        assert!(peak > 1e-3, "no transient");
        let dx = derivatives(&m, &last).unwrap();
        let norm = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "derivative norm {norm}");
    }

    #[test]
    fn mismatch_formula() {
        let mk = |p: Vec<f64>, q: Vec<f64>| {
            Trajectory::new(0.0, 0.1, vec![1.0; 4], vec![0.0; 4])
                .unwrap()
                .with_power(p, q)
                .unwrap()
        };
        let meas = mk(vec![0.0, 1.0, 0.0, 1.0], vec![0.2, 0.3, 0.2, 0.3]);
        let sim = mk(vec![0.1, 1.1, 0.1, 1.1], vec![0.2, 0.3, 0.2, 0.3]);
        let s = mismatch(&sim, &meas).unwrap();
        assert!((s.nrmse_p - 0.1 / (1.0 + NRMSE_EPSILON)).abs() < 1e-12);
        assert_eq!(s.nrmse_q, 0.0);
        assert!((s.combined - 0.05).abs() < 1e-9);
        assert_eq!(mismatch(&meas, &meas).unwrap().combined, 0.0);

        let flat = mk(vec![0.8; 4], vec![0.2; 4]);
        assert!(mismatch(&sim, &flat).unwrap().combined.is_finite());
        assert!(matches!(
            mismatch(&sim, &meas.voltage_only()),
            Err(PlaybackError::MissingChannel(_))
        ));
    }

    #[test]
    fn threshold_is_strict() {
        let s = |c: f64| MismatchScore {
            nrmse_p: c,
            nrmse_q: c,
            combined: c,
        };
        assert!(!needs_calibration(&s(0.0), DEFAULT_MISMATCH_THRESHOLD));
        assert!(needs_calibration(&s(0.5), 0.02));
        assert!(!needs_calibration(&s(0.02), 0.02));
    }
}
