use crate::num::Real;

use super::unit::{Inputs, SimState, UnitModel};
use super::ModelError;

/// States larger than this in magnitude are reported as divergence.
const DIVERGENCE_BOUND: f64 = 1e6;

/// One classical fourth-order Runge-Kutta step of `dx/dt = f(t, x)`.
///
/// `f(t, x, dx)` writes the derivative into `dx`.
pub fn rk4_step<T: Real, F>(mut f: F, t: T, x: &[T], h: T) -> Vec<T>
where
    F: FnMut(T, &[T], &mut [T]),
{
    let mut ws = Rk4Workspace::new(x.len());
    let mut out = x.to_vec();
    ws.step(&mut f, t, &mut out, h);
    out
}

/// Scratch buffers reused across steps.
#[derive(Debug, Clone)]
pub(crate) struct Rk4Workspace<T> {
    k1: Vec<T>,
    k2: Vec<T>,
    k3: Vec<T>,
    k4: Vec<T>,
    tmp: Vec<T>,
}

impl<T: Real> Rk4Workspace<T> {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            k1: vec![T::zero(); n],
            k2: vec![T::zero(); n],
            k3: vec![T::zero(); n],
            k4: vec![T::zero(); n],
            tmp: vec![T::zero(); n],
        }
    }

    /// Advances `x` in place by one step of size `h`.
    pub(crate) fn step<F>(&mut self, f: &mut F, t: T, x: &mut [T], h: T)
    where
        F: FnMut(T, &[T], &mut [T]),
    {
        let half = h * T::lit(0.5);
        let two = T::lit(2.0);
        let sixth = h / T::lit(6.0);
        let n = x.len();

        f(t, x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + half * self.k1[i];
        }
        f(t + half, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + half * self.k2[i];
        }
        f(t + half, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        f(t + h, &self.tmp, &mut self.k4);
        for i in 0..n {
            x[i] = x[i] + sixth * (self.k1[i] + two * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
    }
}

/// Advances the unit by `dt` holding the inputs of `state` constant.
pub fn step_rk4<T: Real>(model: &UnitModel<T>, state: &SimState<T>, dt: T) -> Result<SimState<T>, ModelError> {
    let inputs = state.inputs;
    step_rk4_with_inputs(model, state, dt, |_| inputs)
}

/// Advances the unit by `dt` with inputs evaluated at the stage times.
/// The returned state carries the inputs at `t + dt`.
pub fn step_rk4_with_inputs<T: Real, I>(
    model: &UnitModel<T>,
    state: &SimState<T>,
    dt: T,
    inputs_at: I,
) -> Result<SimState<T>, ModelError>
where
    I: Fn(T) -> Inputs<T>,
{
    model.check_state(state)?;
    let mut ws = Rk4Workspace::new(model.dim());
    let mut x = state.x.clone();
    advance(model, &mut ws, &mut x, state.t, dt, state.setpoints, &inputs_at)?;
    Ok(SimState {
        x,
        t: state.t + dt,
        inputs: inputs_at(state.t + dt),
        setpoints: state.setpoints,
    })
}

/// In-place step shared with the playback loop.
pub(crate) fn advance<T: Real, I>(
    model: &UnitModel<T>,
    ws: &mut Rk4Workspace<T>,
    x: &mut [T],
    t: T,
    dt: T,
    setpoints: super::unit::Setpoints<T>,
    inputs_at: &I,
) -> Result<(), ModelError>
where
    I: Fn(T) -> Inputs<T>,
{
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(ModelError::InvalidStep(dt.to_f64_lossy()));
    }
    let mut f = |tt: T, xx: &[T], dx: &mut [T]| {
        model.rhs(xx, inputs_at(tt), setpoints, dx);
    };
    ws.step(&mut f, t, x, dt);
    for (i, block) in model.limited_blocks() {
        x[i] = block.project(x[i]);
    }
    let bound = T::lit(DIVERGENCE_BOUND);
    if x.iter().any(|v| !v.is_finite() || v.abs() > bound) {
        return Err(ModelError::Diverged {
            t: (t + dt).to_f64_lossy(),
        });
    }
    Ok(())
}
