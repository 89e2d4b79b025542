//! Elementary control blocks the unit model is wired from.

use crate::num::Real;

use super::ModelError;

/// Time constants below this are treated as algebraic (zero-state) blocks.
pub const DEFAULT_LAG_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Gain,
    FirstOrderLag,
    LeadLag,
    Washout,
    LimitedIntegrator,
    Limiter,
    QuadraticSaturation,
}

/// A single-input single-output block with at most one state.
///
/// Dynamic blocks expose `derivative(state, input)` and `output(state, input)`;
/// both are pure. Limited blocks use non-windup limits: the state derivative is
/// zeroed when the state sits on a limit and is pushed outward.
#[derive(Debug, Clone, PartialEq)]
pub enum Block<T> {
    Gain { k: T },
    /// `k / (1 + sT)`, optional non-windup output limits.
    Lag {
        k: T,
        t: T,
        limits: Option<(T, T)>,
        algebraic: bool,
    },
    /// `(1 + s t_lead) / (1 + s t_lag)`.
    LeadLag { t_lead: T, t_lag: T, algebraic: bool },
    /// `k s t / (1 + s t)`.
    Washout { k: T, t: T },
    /// `k / s` with non-windup limits.
    LimitedIntegrator { k: T, lo: T, hi: T },
    /// Static clamp.
    Limiter { lo: T, hi: T },
    /// Quadratic magnetic saturation `b (x - a)^2 / x` for `x > a`.
    QuadraticSaturation { a: T, b: T },
}

fn check_time_constant<T: Real>(name: &str, t: T) -> Result<(), ModelError> {
    if !t.is_finite() || t <= T::zero() {
        return Err(ModelError::NonPositiveTimeConstant {
            name: name.to_string(),
            value: t.to_f64_lossy(),
        });
    }
    Ok(())
}

impl<T: Real> Block<T> {
    pub fn gain(k: T) -> Self {
        Block::Gain { k }
    }

    pub fn lag(name: &str, k: T, t: T, limits: Option<(T, T)>) -> Result<Self, ModelError> {
        check_time_constant(name, t)?;
        Ok(Block::Lag {
            k,
            t,
            limits,
            algebraic: t < T::lit(DEFAULT_LAG_EPSILON),
        })
    }

    pub fn lead_lag(name: &str, t_lead: T, t_lag: T) -> Result<Self, ModelError> {
        check_time_constant(name, t_lag)?;
        if !t_lead.is_finite() || t_lead < T::zero() {
            return Err(ModelError::NonPositiveTimeConstant {
                name: format!("{name} (lead)"),
                value: t_lead.to_f64_lossy(),
            });
        }
        Ok(Block::LeadLag {
            t_lead,
            t_lag,
            algebraic: t_lag < T::lit(DEFAULT_LAG_EPSILON),
        })
    }

    pub fn washout(name: &str, k: T, t: T) -> Result<Self, ModelError> {
        check_time_constant(name, t)?;
        Ok(Block::Washout { k, t })
    }

    pub fn limited_integrator(k: T, lo: T, hi: T) -> Self {
        Block::LimitedIntegrator { k, lo, hi }
    }

    pub fn limiter(lo: T, hi: T) -> Self {
        Block::Limiter { lo, hi }
    }

    /// Builds the saturation curve through `S(1.0) = s10` and `S(1.2) = s12`.
    /// Returns `None` when saturation is disabled (`s10 == 0`).
    pub fn saturation_from_points(s10: T, s12: T) -> Result<Option<Self>, ModelError> {
        if s10 == T::zero() && s12 == T::zero() {
            return Ok(None);
        }
        let onep2 = T::lit(1.2);
        if s10 <= T::zero() || onep2 * s12 <= s10 {
            return Err(ModelError::InvalidSaturation {
                s10: s10.to_f64_lossy(),
                s12: s12.to_f64_lossy(),
            });
        }
        let r = (onep2 * s12 / s10).sqrt();
        let a = (onep2 - r) / (T::one() - r);
        let b = s10 / ((T::one() - a) * (T::one() - a));
        Ok(Some(Block::QuadraticSaturation { a, b }))
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Gain { .. } => BlockKind::Gain,
            Block::Lag { .. } => BlockKind::FirstOrderLag,
            Block::LeadLag { .. } => BlockKind::LeadLag,
            Block::Washout { .. } => BlockKind::Washout,
            Block::LimitedIntegrator { .. } => BlockKind::LimitedIntegrator,
            Block::Limiter { .. } => BlockKind::Limiter,
            Block::QuadraticSaturation { .. } => BlockKind::QuadraticSaturation,
        }
    }

    pub fn state_count(&self) -> usize {
        match self {
            Block::Lag { algebraic, .. } | Block::LeadLag { algebraic, .. } => usize::from(!algebraic),
            Block::Washout { .. } | Block::LimitedIntegrator { .. } => 1,
            Block::Gain { .. } | Block::Limiter { .. } | Block::QuadraticSaturation { .. } => 0,
        }
    }

    /// Time derivative of the block state. Zero for stateless blocks.
    pub fn derivative(&self, state: T, input: T) -> T {
        match *self {
            Block::Lag {
                k,
                t,
                limits,
                algebraic,
            } => {
                if algebraic {
                    return T::zero();
                }
                let d = (k * input - state) / t;
                non_windup(state, d, limits)
            }
            Block::LeadLag { t_lag, algebraic, .. } => {
                if algebraic {
                    T::zero()
                } else {
                    (input - state) / t_lag
                }
            }
            Block::Washout { t, .. } => (input - state) / t,
            Block::LimitedIntegrator { k, lo, hi } => non_windup(state, k * input, Some((lo, hi))),
            Block::Gain { .. } | Block::Limiter { .. } | Block::QuadraticSaturation { .. } => T::zero(),
        }
    }

    /// Block output for the given state (ignored by stateless blocks) and input.
    pub fn output(&self, state: T, input: T) -> T {
        match *self {
            Block::Gain { k } => k * input,
            Block::Lag {
                k,
                limits,
                algebraic,
                ..
            } => {
                let y = if algebraic { k * input } else { state };
                clamp_opt(y, limits)
            }
            Block::LeadLag {
                t_lead,
                t_lag,
                algebraic,
            } => {
                if algebraic {
                    input
                } else {
                    let ratio = t_lead / t_lag;
                    ratio * input + (T::one() - ratio) * state
                }
            }
            Block::Washout { k, .. } => k * (input - state),
            Block::LimitedIntegrator { .. } => state,
            Block::Limiter { lo, hi } => clamp(input, lo, hi),
            Block::QuadraticSaturation { a, b } => {
                if input > a {
                    b * (input - a) * (input - a) / input
                } else {
                    T::zero()
                }
            }
        }
    }

    /// State that holds the block at rest for a constant input.
    pub fn steady_state(&self, input: T) -> T {
        match *self {
            Block::Lag { k, limits, .. } => clamp_opt(k * input, limits),
            Block::LeadLag { .. } | Block::Washout { .. } => input,
            // any state is an equilibrium of an integrator with zero input
            _ => T::zero(),
        }
    }

    /// Projects a state back inside the block's limits after an integration step.
    pub fn project(&self, state: T) -> T {
        match *self {
            Block::Lag {
                limits, algebraic, ..
            } if !algebraic => clamp_opt(state, limits),
            Block::LimitedIntegrator { lo, hi, .. } => clamp(state, lo, hi),
            _ => state,
        }
    }
}

fn non_windup<T: Real>(state: T, d: T, limits: Option<(T, T)>) -> T {
    match limits {
        Some((lo, hi)) if (state >= hi && d > T::zero()) || (state <= lo && d < T::zero()) => T::zero(),
        _ => d,
    }
}

fn clamp<T: Real>(v: T, lo: T, hi: T) -> T {
    if v > hi {
        hi
    } else if v < lo {
        lo
    } else {
        v
    }
}

fn clamp_opt<T: Real>(v: T, limits: Option<(T, T)>) -> T {
    match limits {
        Some((lo, hi)) => clamp(v, lo, hi),
        None => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lag_at_equilibrium_has_zero_derivative() {
        let lag = Block::lag("T", 1.0, 2.0, None).unwrap();
        assert_eq!(lag.derivative(1.0, 1.0), 0.0);
    }

    #[test]
    fn lag_derivative_from_rest() {
        let lag = Block::lag("T", 1.0, 2.0, None).unwrap();
        assert_eq!(lag.derivative(0.0, 1.0), 0.5);
    }

    #[test]
    fn tiny_lag_becomes_algebraic() {
        let lag = Block::lag("Ta", 3.0, 1e-6, None).unwrap();
        assert_eq!(lag.state_count(), 0);
        assert_eq!(lag.output(0.0, 2.0), 6.0);
    }

    #[test]
    fn rejects_nonpositive_lag() {
        assert!(Block::<f64>::lag("T", 1.0, 0.0, None).is_err());
        assert!(Block::<f64>::lead_lag("Tb", 1.0, -1.0).is_err());
        assert!(Block::<f64>::washout("Tw", 1.0, 0.0).is_err());
    }

    #[test]
    fn lead_lag_high_frequency_gain() {
        let ll = Block::<f64>::lead_lag("Tb", 3.0, 43.0).unwrap();
        // with state at zero the instantaneous response is t_lead / t_lag
        assert!((ll.output(0.0, 1.0) - 3.0 / 43.0).abs() < 1e-15);
        assert_eq!(ll.output(1.0, 1.0), 1.0);
    }

    #[test]
    fn non_windup_blocks_outward_motion_only() {
        let integ = Block::limited_integrator(1.0, -1.0, 1.0);
        assert_eq!(integ.derivative(1.0, 5.0), 0.0);
        assert_eq!(integ.derivative(1.0, -5.0), -5.0);
        assert_eq!(integ.project(1.3), 1.0);
    }

    #[test]
    fn washout_blocks_dc() {
        let w = Block::washout("Tw", 2.0, 10.0).unwrap();
        let x = w.steady_state(0.7);
        assert_eq!(w.output(x, 0.7), 0.0);
        assert_eq!(w.derivative(x, 0.7), 0.0);
    }

    #[test]
    fn saturation_curve_passes_through_points() {
        let sat = Block::<f64>::saturation_from_points(0.05, 0.3).unwrap().unwrap();
        assert!((sat.output(0.0, 1.0) - 0.05).abs() < 1e-12);
        assert!((sat.output(0.0, 1.2) - 0.3).abs() < 1e-12);
        assert_eq!(sat.kind(), BlockKind::QuadraticSaturation);
        assert!(Block::<f64>::saturation_from_points(0.0, 0.0).unwrap().is_none());
    }
}
