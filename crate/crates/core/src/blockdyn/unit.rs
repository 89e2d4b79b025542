use crate::num::Real;

use super::block::Block;
use super::config::{StructureFlags, UnitConfig};
use super::machine::{MachineParams, StatorSolution, MACHINE_STATES};
use super::params::{Assignment, ParameterSet};
use super::ModelError;

pub const FREQUENCY_BASE_HZ: f64 = 60.0;

/// Played-back terminal voltage phasor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inputs<T> {
    pub vmag: T,
    pub vang: T,
}

/// References held fixed after initialisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setpoints<T> {
    pub vref: T,
    pub pref: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState<T> {
    pub x: Vec<T>,
    pub t: T,
    pub inputs: Inputs<T>,
    pub setpoints: Setpoints<T>,
}

/// Where each block's state lives in the state vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateLayout {
    pub lead_lag: Option<usize>,
    pub regulator: Option<usize>,
    pub rate_feedback: usize,
    pub governor: usize,
    pub pss_washout: Option<usize>,
    pub pss_lead_lag1: Option<usize>,
    pub pss_lead_lag2: Option<usize>,
    pub dim: usize,
}

impl StateLayout {
    pub const DELTA: usize = 0;
    pub const SPEED: usize = 1;
    pub const EQP: usize = 2;
    pub const PSI1D: usize = 3;
    pub const EDP: usize = 4;
    pub const PSI2Q: usize = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Exciter<T> {
    pub xc: T,
    pub lead_lag: Block<T>,
    pub regulator: Block<T>,
    pub rate_feedback: Block<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Governor<T> {
    pub droop: T,
    pub valve: Block<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Stabilizer<T> {
    pub washout: Block<T>,
    pub lead_lag1: Block<T>,
    pub lead_lag2: Block<T>,
    pub limiter: Block<T>,
}

/// Immutable composed model of one generating unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitModel<T> {
    params: ParameterSet<T>,
    flags: StructureFlags,
    pub(crate) machine: MachineParams<T>,
    pub(crate) exciter: Exciter<T>,
    pub(crate) governor: Governor<T>,
    pub(crate) stabilizer: Option<Stabilizer<T>>,
    layout: StateLayout,
    omega_base: T,
    default_operating_point: (T, T),
}

/// Signals computed alongside the state derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Signals<T> {
    pub stator: StatorSolution<T>,
    pub efd: T,
    pub pm: T,
}

fn limits<T: Real>(name: &str, lo: T, hi: T) -> Result<(T, T), ModelError> {
    if lo > hi {
        return Err(ModelError::InvalidLimits {
            name: name.into(),
            lo: lo.to_f64_lossy(),
            hi: hi.to_f64_lossy(),
        });
    }
    Ok((lo, hi))
}

/// Builds a unit model from a complete parameter set.
pub fn build_unit<T: Real>(params: &ParameterSet<T>, flags: StructureFlags) -> Result<UnitModel<T>, ModelError> {
    UnitModel::new(params.clone(), flags)
}

impl<T: Real> UnitModel<T> {
    pub fn new(params: ParameterSet<T>, flags: StructureFlags) -> Result<Self, ModelError> {
        let machine = MachineParams::from_params(&params)?;
        let v = |n: &str| params.value(n);

        let vr = limits("Vrmin/Vrmax", v("Vrmin")?, v("Vrmax")?)?;
        let ka = v("Ka")?;
        if !(ka > T::zero()) {
            return Err(ModelError::Config(format!("Ka must be positive (got {})", ka.to_f64_lossy())));
        }
        let exciter = Exciter {
            xc: v("Xc")?,
            lead_lag: Block::lead_lag("Tb", v("Tc")?, v("Tb")?)?,
            regulator: Block::lag("Ta", ka, v("Ta")?, Some(vr))?,
            rate_feedback: {
                let tf = v("Tf")?;
                Block::washout("Tf", v("Kf")? / tf, tf)?
            },
        };

        let tact = v("Tact")?;
        if !(tact > T::zero()) {
            return Err(ModelError::NonPositiveTimeConstant {
                name: "Tact".into(),
                value: tact.to_f64_lossy(),
            });
        }
        let (pmin, pmax) = limits("Pmin/Pmax", v("Pmin")?, v("Pmax")?)?;
        let governor = Governor {
            droop: v("R")?,
            valve: Block::limited_integrator(v("Ks")? / tact, pmin, pmax),
        };

        // stabilizer parameters are validated even when the block is switched off
        let vs = limits("Vsmin/Vsmax", v("Vsmin")?, v("Vsmax")?)?;
        let stab = Stabilizer {
            washout: Block::washout("Tw", v("Kpss")?, v("Tw")?)?,
            lead_lag1: Block::lead_lag("T2", v("T1")?, v("T2")?)?,
            lead_lag2: Block::lead_lag("T4", v("T3")?, v("T4")?)?,
            limiter: Block::limiter(vs.0, vs.1),
        };
        let stabilizer = flags.stabilizer.then_some(stab);

        let mut next = MACHINE_STATES;
        let mut alloc = |b: &Block<T>| {
            if b.state_count() == 1 {
                next += 1;
                Some(next - 1)
            } else {
                None
            }
        };
        let lead_lag = alloc(&exciter.lead_lag);
        let regulator = alloc(&exciter.regulator);
        let rate_feedback = alloc(&exciter.rate_feedback).expect("washout has a state");
        let governor_idx = alloc(&governor.valve).expect("integrator has a state");
        let (pss_washout, pss_lead_lag1, pss_lead_lag2) = match &stabilizer {
            Some(s) => (alloc(&s.washout), alloc(&s.lead_lag1), alloc(&s.lead_lag2)),
            None => (None, None, None),
        };
        let layout = StateLayout {
            lead_lag,
            regulator,
            rate_feedback,
            governor: governor_idx,
            pss_washout,
            pss_lead_lag1,
            pss_lead_lag2,
            dim: next,
        };

        Ok(Self {
            params,
            flags,
            machine,
            exciter,
            governor,
            stabilizer,
            layout,
            omega_base: T::lit(2.0 * std::f64::consts::PI * FREQUENCY_BASE_HZ),
            default_operating_point: (
                T::lit(super::config::DEFAULT_OPERATING_P),
                T::lit(super::config::DEFAULT_OPERATING_Q),
            ),
        })
    }

    pub fn from_config(cfg: &UnitConfig) -> Result<Self, ModelError> {
        let mut model = Self::new(cfg.params.cast(), cfg.flags)?;
        model.default_operating_point = (T::lit(cfg.operating_point.0), T::lit(cfg.operating_point.1));
        Ok(model)
    }

    /// Same structure, with some parameter values replaced.
    pub fn with_assignment(&self, assignment: &Assignment<T>) -> Result<Self, ModelError> {
        if assignment.is_empty() {
            return Ok(self.clone());
        }
        let mut model = Self::new(self.params.with_assignment(assignment)?, self.flags)?;
        model.default_operating_point = self.default_operating_point;
        Ok(model)
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn flags(&self) -> StructureFlags {
        self.flags
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn omega_base(&self) -> T {
        self.omega_base
    }

    pub fn default_operating_point(&self) -> (T, T) {
        self.default_operating_point
    }

    /// Number of states contributed by the stabilizer (zero when disabled).
    pub fn stabilizer_state_count(&self) -> usize {
        self.stabilizer.as_ref().map_or(0, |s| {
            s.washout.state_count() + s.lead_lag1.state_count() + s.lead_lag2.state_count()
        })
    }

    pub(crate) fn limited_blocks(&self) -> impl Iterator<Item = (usize, &Block<T>)> {
        let reg = self.layout.regulator.map(|i| (i, &self.exciter.regulator));
        std::iter::once((self.layout.governor, &self.governor.valve)).chain(reg)
    }

    /// Evaluates the state derivatives into `dx` and returns the key signals.
    pub(crate) fn rhs(&self, x: &[T], inputs: Inputs<T>, sp: Setpoints<T>, dx: &mut [T]) -> Signals<T> {
        let st = self.machine.stator(x, inputs.vmag, inputs.vang);
        let dw = x[StateLayout::SPEED];
        let at = |idx: Option<usize>| idx.map_or(T::zero(), |i| x[i]);

        // stabilizer: speed -> washout -> lead-lag -> lead-lag -> limiter
        let vs = match &self.stabilizer {
            Some(s) => {
                let (iw, i1, i2) = (
                    self.layout.pss_washout,
                    self.layout.pss_lead_lag1,
                    self.layout.pss_lead_lag2,
                );
                let wo = s.washout.output(at(iw), dw);
                let o1 = s.lead_lag1.output(at(i1), wo);
                let o2 = s.lead_lag2.output(at(i2), o1);
                if let Some(i) = iw {
                    dx[i] = s.washout.derivative(x[i], dw);
                }
                if let Some(i) = i1 {
                    dx[i] = s.lead_lag1.derivative(x[i], wo);
                }
                if let Some(i) = i2 {
                    dx[i] = s.lead_lag2.derivative(x[i], o1);
                }
                s.limiter.output(T::zero(), o2)
            }
            None => T::zero(),
        };

        // exciter
        let ex = &self.exciter;
        let vc = inputs.vmag + ex.xc * st.q / inputs.vmag;
        let err = sp.vref - vc + vs;
        let y = ex.lead_lag.output(at(self.layout.lead_lag), err);
        if let Some(i) = self.layout.lead_lag {
            dx[i] = ex.lead_lag.derivative(x[i], err);
        }
        let ifb = self.layout.rate_feedback;
        let efd = match self.layout.regulator {
            Some(i) => {
                let efd = ex.regulator.output(x[i], T::zero());
                let vf = ex.rate_feedback.output(x[ifb], efd);
                dx[i] = ex.regulator.derivative(x[i], y - vf);
                efd
            }
            None => algebraic_regulator(&ex.regulator, &ex.rate_feedback, y, x[ifb]),
        };
        dx[ifb] = ex.rate_feedback.derivative(x[ifb], efd);

        // governor: droop on valve position, integrating actuator
        let gov = &self.governor;
        let ig = self.layout.governor;
        let pv = x[ig];
        dx[ig] = gov.valve.derivative(pv, gov.droop * (sp.pref - pv) - dw);
        let pm = gov.valve.output(pv, T::zero());

        self.machine.derivatives(x, &st, efd, pm, self.omega_base, dx);
        Signals { stator: st, efd, pm }
    }

    /// Terminal (P, Q) for state `x`; no validation.
    pub fn terminal_power(&self, x: &[T], inputs: Inputs<T>) -> (T, T) {
        let st = self.machine.stator(x, inputs.vmag, inputs.vang);
        (st.p, st.q)
    }

    pub(crate) fn check_state(&self, s: &SimState<T>) -> Result<(), ModelError> {
        if s.x.len() != self.dim() {
            return Err(ModelError::StateLength {
                expected: self.dim(),
                got: s.x.len(),
            });
        }
        let finite = s.x.iter().all(|v| v.is_finite())
            && s.inputs.vmag.is_finite()
            && s.inputs.vang.is_finite()
            && s.setpoints.vref.is_finite()
            && s.setpoints.pref.is_finite();
        if !finite {
            return Err(ModelError::NonFinite { t: s.t.to_f64_lossy() });
        }
        Ok(())
    }
}

/// Regulator without its own lag: solves the loop through the rate feedback
/// washout, `efd = Ka (y - g (efd - xf))`, then clamps.
fn algebraic_regulator<T: Real>(regulator: &Block<T>, rate_feedback: &Block<T>, y: T, xf: T) -> T {
    let (ka, lim) = match *regulator {
        Block::Lag { k, limits, .. } => (k, limits),
        _ => unreachable!("regulator is a lag block"),
    };
    let g = match *rate_feedback {
        Block::Washout { k, .. } => k,
        _ => unreachable!("rate feedback is a washout block"),
    };
    let efd = ka * (y + g * xf) / (T::one() + ka * g);
    match lim {
        Some((lo, hi)) => efd.max(lo).min(hi),
        None => efd,
    }
}

/// State derivatives at `s`. Pure: identical arguments give identical output.
pub fn derivatives<T: Real>(model: &UnitModel<T>, s: &SimState<T>) -> Result<Vec<T>, ModelError> {
    model.check_state(s)?;
    let mut dx = vec![T::zero(); model.dim()];
    model.rhs(&s.x, s.inputs, s.setpoints, &mut dx);
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { t: s.t.to_f64_lossy() });
    }
    Ok(dx)
}

/// Active and reactive power delivered at the terminal.
pub fn compute_output<T: Real>(model: &UnitModel<T>, s: &SimState<T>) -> Result<(T, T), ModelError> {
    model.check_state(s)?;
    let st = model.machine.stator(&s.x, s.inputs.vmag, s.inputs.vang);
    if !(st.p.is_finite() && st.q.is_finite()) {
        return Err(ModelError::NonFinite { t: s.t.to_f64_lossy() });
    }
    Ok((st.p, st.q))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_model() -> UnitModel<f64> {
        UnitModel::from_config(&UnitConfig::default()).unwrap()
    }

    #[test]
    fn builds_reference_unit() {
        let m = default_model();
        assert!(m.dim() > 0);
        assert_eq!(m.params().value("H").unwrap(), 4.60);
        let names: Vec<_> = m.params().names().collect();
        let cfg = UnitConfig::default();
        assert!(names.iter().copied().eq(cfg.params.names()));
    }

    #[test]
    fn zero_inertia_is_rejected() {
        let mut cfg = UnitConfig::default();
        cfg.params.set_value("H", 0.0).unwrap();
        let err = UnitModel::<f64>::from_config(&cfg).unwrap_err();
        assert!(err.to_string().contains("nonpositive inertia"), "{err}");
    }

    #[test]
    fn disabling_stabilizer_drops_its_states() {
        let with = default_model();
        let mut cfg = UnitConfig::default();
        cfg.flags.stabilizer = false;
        let without = UnitModel::<f64>::from_config(&cfg).unwrap();
        assert_eq!(with.dim() - without.dim(), with.stabilizer_state_count());
        assert_eq!(with.stabilizer_state_count(), 3);
        assert_eq!(without.stabilizer_state_count(), 0);
    }

    #[test]
    fn reactance_ordering_is_validated() {
        let mut cfg = UnitConfig::default();
        cfg.params.set_value("Xdp", 2.0).unwrap();
        assert!(matches!(
            UnitModel::<f64>::from_config(&cfg),
            Err(ModelError::ReactanceOrdering(_))
        ));
        let mut cfg = UnitConfig::default();
        cfg.params.set_value("Xl", 0.3).unwrap();
        assert!(UnitModel::<f64>::from_config(&cfg).is_err());
    }

    #[test]
    fn nonpositive_time_constant_is_rejected() {
        for name in ["Tb", "Td0p", "Tact", "Tw", "Tf"] {
            let mut cfg = UnitConfig::default();
            cfg.params.set_value(name, 0.0).unwrap();
            let err = UnitModel::<f64>::from_config(&cfg).unwrap_err();
            assert!(matches!(err, ModelError::NonPositiveTimeConstant { .. }), "{name}: {err}");
        }
    }

    #[test]
    fn tiny_regulator_lag_is_algebraic() {
        let mut cfg = UnitConfig::default();
        cfg.params.set_value("Ta", 1e-6).unwrap();
        let m = UnitModel::<f64>::from_config(&cfg).unwrap();
        assert_eq!(m.layout().regulator, None);
        assert_eq!(m.dim(), default_model().dim() - 1);
    }

    #[test]
    fn derivatives_reject_wrong_length() {
        let m = default_model();
        let s = SimState {
            x: vec![0.0; m.dim() + 1],
            t: 0.0,
            inputs: Inputs { vmag: 1.0, vang: 0.0 },
            setpoints: Setpoints { vref: 1.0, pref: 0.8 },
        };
        assert!(matches!(derivatives(&m, &s), Err(ModelError::StateLength { .. })));
        let mut s2 = s.clone();
        s2.x.pop();
        s2.x[2] = f64::NAN;
        assert!(matches!(derivatives(&m, &s2), Err(ModelError::NonFinite { .. })));
    }
}
