//! Round-rotor synchronous machine with transient and subtransient dynamics.
//!
//! States (in order): rotor angle δ [rad], speed deviation Δω [pu],
//! E'q, ψ1d, E'd, ψ2q [pu]. Stator resistance and stator transients are
//! neglected and X''d = X''q, so the network sees a voltage source behind the
//! subtransient reactance. Machine dq quantities map to the network frame by
//! `(d + jq) · e^{j(δ - π/2)}`.

use crate::num::Real;

use super::block::Block;
use super::params::ParameterSet;
use super::ModelError;

pub const MACHINE_STATES: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct MachineParams<T> {
    pub h: T,
    pub d: T,
    pub xd: T,
    pub xq: T,
    pub xdp: T,
    pub xqp: T,
    pub xdpp: T,
    pub xl: T,
    pub td0p: T,
    pub tq0p: T,
    pub td0pp: T,
    pub tq0pp: T,
    pub saturation: Option<Block<T>>,
}

/// Algebraic stator quantities for one machine state and terminal voltage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatorSolution<T> {
    pub vd: T,
    pub vq: T,
    pub id: T,
    pub iq: T,
    /// Subtransient EMF components E''d, E''q.
    pub ed_pp: T,
    pub eq_pp: T,
    pub p: T,
    pub q: T,
}

fn positive_tc<T: Real>(name: &str, v: T) -> Result<T, ModelError> {
    if !(v > T::zero()) {
        return Err(ModelError::NonPositiveTimeConstant {
            name: name.into(),
            value: v.to_f64_lossy(),
        });
    }
    Ok(v)
}

impl<T: Real> MachineParams<T> {
    pub fn from_params(ps: &ParameterSet<T>) -> Result<Self, ModelError> {
        let h = ps.value("H")?;
        if !(h > T::zero()) {
            return Err(ModelError::NonPositiveInertia(h.to_f64_lossy()));
        }
        let m = Self {
            h,
            d: ps.value("D")?,
            xd: ps.value("Xd")?,
            xq: ps.value("Xq")?,
            xdp: ps.value("Xdp")?,
            xqp: ps.value("Xqp")?,
            xdpp: ps.value("Xdpp")?,
            xl: ps.value("Xl")?,
            td0p: positive_tc("Td0p", ps.value("Td0p")?)?,
            tq0p: positive_tc("Tq0p", ps.value("Tq0p")?)?,
            td0pp: positive_tc("Td0pp", ps.value("Td0pp")?)?,
            tq0pp: positive_tc("Tq0pp", ps.value("Tq0pp")?)?,
            saturation: Block::saturation_from_points(ps.value("S10")?, ps.value("S12")?)?,
        };
        m.validate_reactances()?;
        Ok(m)
    }

    fn validate_reactances(&self) -> Result<(), ModelError> {
        let f = |v: T| v.to_f64_lossy();
        if !(self.xd >= self.xdp && self.xdp >= self.xdpp) {
            return Err(ModelError::ReactanceOrdering(format!(
                "need Xd >= Xdp >= Xdpp, got {} / {} / {}",
                f(self.xd),
                f(self.xdp),
                f(self.xdpp)
            )));
        }
        if !(self.xq >= self.xqp && self.xqp >= self.xdpp) {
            return Err(ModelError::ReactanceOrdering(format!(
                "need Xq >= Xqp >= Xdpp, got {} / {} / {}",
                f(self.xq),
                f(self.xqp),
                f(self.xdpp)
            )));
        }
        if !(self.xdpp > self.xl && self.xl >= T::zero()) {
            return Err(ModelError::ReactanceOrdering(format!(
                "need Xdpp > Xl >= 0, got {} / {}",
                f(self.xdpp),
                f(self.xl)
            )));
        }
        Ok(())
    }

    /// Subtransient EMF (E''d, E''q) from the flux states.
    pub fn subtransient_emf(&self, x: &[T]) -> (T, T) {
        let (eqp, psi1d, edp, psi2q) = (x[2], x[3], x[4], x[5]);
        let dd = self.xdp - self.xl;
        let dq = self.xqp - self.xl;
        let eq_pp = eqp * (self.xdpp - self.xl) / dd + psi1d * (self.xdp - self.xdpp) / dd;
        let psi_q_pp = -edp * (self.xdpp - self.xl) / dq + psi2q * (self.xqp - self.xdpp) / dq;
        (-psi_q_pp, eq_pp)
    }

    pub fn stator(&self, x: &[T], vmag: T, vang: T) -> StatorSolution<T> {
        let (ed_pp, eq_pp) = self.subtransient_emf(x);
        let (s, c) = (x[0] - vang).sin_cos();
        let vd = vmag * s;
        let vq = vmag * c;
        let id = (eq_pp - vq) / self.xdpp;
        let iq = (vd - ed_pp) / self.xdpp;
        StatorSolution {
            vd,
            vq,
            id,
            iq,
            ed_pp,
            eq_pp,
            p: vd * id + vq * iq,
            q: vq * id - vd * iq,
        }
    }

    /// Writes the six machine state derivatives into `dx[..6]`.
    pub fn derivatives(&self, x: &[T], st: &StatorSolution<T>, efd: T, pm: T, omega_base: T, dx: &mut [T]) {
        let (dw, eqp, psi1d, edp, psi2q) = (x[1], x[2], x[3], x[4], x[5]);
        let te = st.p;
        let two = T::lit(2.0);

        let sat = match &self.saturation {
            Some(block) => {
                let mag = (st.ed_pp * st.ed_pp + st.eq_pp * st.eq_pp).sqrt();
                block.output(T::zero(), mag)
            }
            None => T::zero(),
        };

        let kd = (self.xdp - self.xdpp) / ((self.xdp - self.xl) * (self.xdp - self.xl));
        let kq = (self.xqp - self.xdpp) / ((self.xqp - self.xl) * (self.xqp - self.xl));

        dx[0] = omega_base * dw;
        dx[1] = (pm - te - self.d * dw) / (two * self.h);
        dx[2] = (efd - eqp
            - (self.xd - self.xdp) * (st.id - kd * (psi1d + (self.xdp - self.xl) * st.id - eqp))
            - st.eq_pp * sat)
            / self.td0p;
        dx[3] = (eqp - psi1d - (self.xdp - self.xl) * st.id) / self.td0pp;
        dx[4] = (-edp + (self.xq - self.xqp) * (st.iq - kq * (psi2q + (self.xqp - self.xl) * st.iq + edp))
            - (self.xq - self.xl) / (self.xd - self.xl) * st.ed_pp * sat)
            / self.tq0p;
        dx[5] = (-psi2q - edp - (self.xqp - self.xl) * st.iq) / self.tq0pp;
    }
}
