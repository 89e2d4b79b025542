//! Trajectory-sensitivity screening of model parameters.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockdyn::{Assignment, ParameterSet, UnitModel};
use crate::num::Real;
use crate::playback::{playback, PlaybackError, PlaybackOptions, Trajectory};

pub const DEFAULT_DELTA_FRACTION: f64 = 0.02;
pub const DEFAULT_KEEP_RATIO: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("delta fraction must lie in (0, 0.5], got {0}")]
    InvalidDelta(f64),
    #[error("keep ratio must lie in (0, 1), got {0}")]
    InvalidKeepRatio(f64),
    #[error("parameter set is empty")]
    EmptyParameterSet,
    #[error("unknown parameter \"{0}\"")]
    UnknownParameter(String),
    #[error("parameter \"{0}\" has base value 0 and cannot be screened")]
    Unscreenable(String),
    #[error("responses differ in length ({0} vs {1}) or are empty")]
    ResponseLength(usize, usize),
    #[error("non-finite response")]
    NonFinite,
    #[error("playback failed for {name}: {source}")]
    Playback {
        name: String,
        #[source]
        source: PlaybackError,
    },
}

/// How the P and Q channels are scaled before they enter the sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseScaling {
    /// Channels in per-unit as simulated.
    Raw,
    /// Each channel divided by its peak-to-peak range in the base playback,
    /// so P and Q weigh equally regardless of how strongly the event excites them.
    #[default]
    RangeNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityOptions {
    pub delta_fraction: f64,
    pub keep_ratio: f64,
    pub scaling: ResponseScaling,
    pub playback: PlaybackOptions,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        Self {
            delta_fraction: DEFAULT_DELTA_FRACTION,
            keep_ratio: DEFAULT_KEEP_RATIO,
            scaling: ResponseScaling::default(),
            playback: PlaybackOptions::default(),
        }
    }
}

fn check_delta(delta_fraction: f64) -> Result<(), SensitivityError> {
    if !(delta_fraction > 0.0 && delta_fraction <= 0.5) {
        return Err(SensitivityError::InvalidDelta(delta_fraction));
    }
    Ok(())
}

/// Central-difference sensitivity of a response to one scalar parameter.
///
/// `responder(p)` returns the response sequence r^k(p). With
/// `dp = delta_fraction * |p0|` the score is
/// `|p0| / (2m) * sum_k |r^k(p0 + dp) - r^k(p0 - dp)| / dp`, m the response length.
pub fn central_sensitivity<T, F, E>(p0: T, delta_fraction: T, mut responder: F) -> Result<T, SensitivityError>
where
    T: Real,
    F: FnMut(T) -> Result<Vec<T>, E>,
    E: Into<SensitivityError>,
{
    check_delta(delta_fraction.to_f64_lossy())?;
    if p0 == T::zero() {
        return Err(SensitivityError::Unscreenable(String::new()));
    }
    let (p1, p2) = (p0 + delta_fraction * p0.abs(), p0 - delta_fraction * p0.abs());
    // half the spacing of the points actually evaluated
    let dp = (p1 - p2) * T::lit(0.5);
    let r1 = responder(p1).map_err(Into::into)?;
    let r2 = responder(p2).map_err(Into::into)?;
    if r1.len() != r2.len() || r1.is_empty() {
        return Err(SensitivityError::ResponseLength(r1.len(), r2.len()));
    }
    let sum: T = r1.iter().zip(&r2).map(|(a, b)| ((*a - *b) / dp).abs()).sum();
    let m = T::lit(r1.len() as f64);
    let s = p0.abs() / (m + m) * sum;
    if !s.is_finite() {
        return Err(SensitivityError::NonFinite);
    }
    Ok(s)
}

/// Playback-driven response: simulated P followed by simulated Q.
pub struct PlaybackResponder<'a, T> {
    model: &'a UnitModel<T>,
    event: Trajectory<T>,
    opts: PlaybackOptions,
    scale: (T, T),
}

impl<'a, T: Real> PlaybackResponder<'a, T> {
    pub fn new(
        model: &'a UnitModel<T>,
        event: &Trajectory<T>,
        scaling: ResponseScaling,
        opts: PlaybackOptions,
    ) -> Result<Self, SensitivityError> {
        let mut r = Self {
            model,
            event: event.clone(),
            opts,
            scale: (T::one(), T::one()),
        };
        if scaling == ResponseScaling::RangeNormalized {
            let base = r.simulate(&Assignment::new()).map_err(|source| SensitivityError::Playback {
                name: "base".into(),
                source,
            })?;
            let eps = T::lit(crate::playback::NRMSE_EPSILON);
            r.scale = (
                range(base.p.as_deref().unwrap_or_default()) + eps,
                range(base.q.as_deref().unwrap_or_default()) + eps,
            );
        }
        Ok(r)
    }

    fn simulate(&self, overrides: &Assignment<T>) -> Result<Trajectory<T>, PlaybackError> {
        playback(self.model, overrides, &self.event, &self.opts)
    }

    pub fn response(&self, overrides: &Assignment<T>) -> Result<Vec<T>, PlaybackError> {
        let out = self.simulate(overrides)?;
        let p = out.p.unwrap_or_default();
        let q = out.q.unwrap_or_default();
        Ok(p.iter()
            .map(|v| *v / self.scale.0)
            .chain(q.iter().map(|v| *v / self.scale.1))
            .collect())
    }

    /// Sensitivity of the response to `name` around `p0`.
    pub fn sensitivity(&self, name: &str, p0: T, delta_fraction: T) -> Result<T, SensitivityError> {
        if self.model.params().get(name).is_none() {
            return Err(SensitivityError::UnknownParameter(name.into()));
        }
        central_sensitivity(p0, delta_fraction, |p| {
            let a: Assignment<T> = [(name.to_string(), p)].into_iter().collect();
            self.response(&a).map_err(|source| SensitivityError::Playback {
                name: name.into(),
                source,
            })
        })
        .map_err(|e| match e {
            SensitivityError::Unscreenable(_) => SensitivityError::Unscreenable(name.into()),
            other => other,
        })
    }
}

fn range<T: Real>(v: &[T]) -> T {
    let lo = v.iter().copied().fold(T::infinity(), T::min);
    let hi = v.iter().copied().fold(T::neg_infinity(), T::max);
    if v.is_empty() {
        T::zero()
    } else {
        hi - lo
    }
}

/// Sensitivity of one model parameter at its current value for the given event.
pub fn sensitivity_of<T: Real>(
    model: &UnitModel<T>,
    event: &Trajectory<T>,
    name: &str,
    delta_fraction: T,
    scaling: ResponseScaling,
) -> Result<T, SensitivityError> {
    let p0 = model
        .params()
        .value(name)
        .map_err(|_| SensitivityError::UnknownParameter(name.into()))?;
    PlaybackResponder::new(model, event, scaling, PlaybackOptions::default())?.sensitivity(name, p0, delta_fraction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ParamSensitivity<T> {
    pub name: String,
    #[serde(rename = "S")]
    pub s: T,
    pub p0: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SensitivityResult<T> {
    pub delta_fraction: f64,
    pub keep_ratio: f64,
    pub response_scaling: ResponseScaling,
    /// In parameter-set order.
    pub results: Vec<ParamSensitivity<T>>,
    /// Selected names, highest sensitivity first.
    pub selected: Vec<String>,
    /// Parameters with a zero base value.
    pub unscreenable: Vec<String>,
}

impl<T: Real> SensitivityResult<T> {
    pub fn get(&self, name: &str) -> Option<T> {
        self.results.iter().find(|r| r.name == name).map(|r| r.s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sensitivity result serializes")
    }
}

/// Names with `S >= keep_ratio * max S` (and `S > 0`), sorted by descending
/// sensitivity, ties broken by name.
pub fn select_by_ratio<T: Real>(scores: &[(String, T)], keep_ratio: f64) -> Result<Vec<String>, SensitivityError> {
    if !(keep_ratio > 0.0 && keep_ratio < 1.0) {
        return Err(SensitivityError::InvalidKeepRatio(keep_ratio));
    }
    let max = scores.iter().map(|(_, s)| *s).fold(T::zero(), T::max);
    let threshold = T::lit(keep_ratio) * max;
    let mut kept: Vec<&(String, T)> = scores
        .iter()
        .filter(|(_, s)| *s > T::zero() && *s >= threshold)
        .collect();
    kept.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(kept.into_iter().map(|(n, _)| n.clone()).collect())
}

/// Screens every parameter of `params` (names and base values) on the event.
/// Evaluations run in parallel; results keep the order of `params`.
pub fn rank_parameters<T: Real>(
    model: &UnitModel<T>,
    event: &Trajectory<T>,
    params: &ParameterSet<T>,
    opts: &SensitivityOptions,
) -> Result<SensitivityResult<T>, SensitivityError> {
    if params.is_empty() {
        return Err(SensitivityError::EmptyParameterSet);
    }
    check_delta(opts.delta_fraction)?;
    if !(opts.keep_ratio > 0.0 && opts.keep_ratio < 1.0) {
        return Err(SensitivityError::InvalidKeepRatio(opts.keep_ratio));
    }
    let responder = PlaybackResponder::new(model, event, opts.scaling, opts.playback)?;
    let delta = T::lit(opts.delta_fraction);

    let outcomes: Vec<Result<Option<T>, SensitivityError>> = params
        .entries()
        .par_iter()
        .map(|e| match responder.sensitivity(&e.name, e.base_value, delta) {
            Ok(s) => Ok(Some(s)),
            Err(SensitivityError::Unscreenable(_)) => Ok(None),
            Err(other) => Err(other),
        })
        .collect();

    let mut results = Vec::new();
    let mut unscreenable = Vec::new();
    for (e, out) in params.entries().iter().zip(outcomes) {
        match out? {
            Some(s) => results.push(ParamSensitivity {
                name: e.name.clone(),
                s,
                p0: e.base_value,
            }),
            None => unscreenable.push(e.name.clone()),
        }
    }
    let scores: Vec<(String, T)> = results.iter().map(|r| (r.name.clone(), r.s)).collect();
    let selected = select_by_ratio(&scores, opts.keep_ratio)?;
    Ok(SensitivityResult {
        delta_fraction: opts.delta_fraction,
        keep_ratio: opts.keep_ratio,
        response_scaling: opts.scaling,
        results,
        selected,
        unscreenable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    type Never = SensitivityError;

    #[test]
    fn linear_stub_gives_c_times_p0() {
        let c = -3.5;
        let s = central_sensitivity(1.7, 0.02, |p: f64| Ok::<_, Never>(vec![c * p; 11])).unwrap();
        assert!((s - c.abs() * 1.7).abs() <= 1e-12 * s);
        let s = central_sensitivity(3.0, 0.02, |p: f64| Ok::<_, Never>(vec![-4.0 * p; 8])).unwrap();
        assert_eq!(s, 12.0);
    }

    #[test]
    fn quadratic_stub_gives_eight() {
        let s = central_sensitivity(2.0, 0.05, |p: f64| Ok::<_, Never>(vec![p * p; 6])).unwrap();
        assert!((s - 8.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn zero_base_is_unscreenable() {
        let r = central_sensitivity(0.0, 0.02, |p: f64| Ok::<_, Never>(vec![p]));
        assert!(matches!(r, Err(SensitivityError::Unscreenable(_))));
        let r = central_sensitivity(1.0, 0.7, |p: f64| Ok::<_, Never>(vec![p]));
        assert!(matches!(r, Err(SensitivityError::InvalidDelta(_))));
    }

    #[test]
    fn selection_rule_and_tie_break() {
        let sc = |v: &[(&str, f64)]| v.iter().map(|(n, s)| (n.to_string(), *s)).collect::<Vec<_>>();
        let sel = select_by_ratio(&sc(&[("a", 5.0), ("b", 0.1), ("c", 0.0)]), 0.05).unwrap();
        assert_eq!(sel, ["a"]);
        let sel = select_by_ratio(&sc(&[("b", 1.0), ("a", 1.0)]), 0.05).unwrap();
        assert_eq!(sel, ["a", "b"]);
        let sel = select_by_ratio(&sc(&[("x", 0.3), ("y", 2.0), ("z", 0.1)]), 0.05).unwrap();
        assert_eq!(sel, ["y", "x", "z"]);
        assert!(select_by_ratio(&sc(&[("a", 1.0)]), 1.0).is_err());
    }
}
