use std::f64::consts::FRAC_PI_2;

use crate::num::Real;

use super::unit::{Inputs, Setpoints, SimState, StateLayout, UnitModel};
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumOptions {
    pub max_iterations: usize,
    /// Residual tolerance; `None` uses the scalar type's default.
    pub tolerance: Option<f64>,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: None,
        }
    }
}

/// Steady state of the unit delivering (P, Q) at terminal voltage V∠θ.
pub fn init_equilibrium<T: Real>(model: &UnitModel<T>, v: T, theta: T, p: T, q: T) -> Result<SimState<T>, ModelError> {
    init_equilibrium_with(model, v, theta, p, q, &EquilibriumOptions::default())
}

pub fn init_equilibrium_with<T: Real>(
    model: &UnitModel<T>,
    v: T,
    theta: T,
    p: T,
    q: T,
    opts: &EquilibriumOptions,
) -> Result<SimState<T>, ModelError> {
    if !(v > T::zero()) || !v.is_finite() {
        return Err(ModelError::NonPositiveVoltage(v.to_f64_lossy()));
    }
    if !(theta.is_finite() && p.is_finite() && q.is_finite()) {
        return Err(ModelError::Infeasible("non-finite operating point".into()));
    }
    let inputs = Inputs { vmag: v, vang: theta };
    let (x0, sp0, efd0) = seed(model, v, theta, p, q)?;
    check_limits(model, efd0, p)?;
    let n = model.dim();

    let mut z = x0;
    z.push(sp0.vref);
    z.push(sp0.pref);
    let tol = opts.tolerance.map(T::lit).unwrap_or_else(T::solve_tolerance);

    let mut scratch = vec![T::zero(); n];
    let mut residual = |z: &[T], out: &mut [T]| {
        let sp = Setpoints {
            vref: z[n],
            pref: z[n + 1],
        };
        let sig = model.rhs(&z[..n], inputs, sp, &mut scratch);
        out[..n].copy_from_slice(&scratch);
        out[n] = sig.stator.p - p;
        out[n + 1] = sig.stator.q - q;
    };

    let m = n + 2;
    let mut r = vec![T::zero(); m];
    residual(&z, &mut r);
    let mut norm = inf_norm(&r);
    let mut iterations = 0;
    while !(norm < tol) {
        if iterations >= opts.max_iterations || !norm.is_finite() {
            return Err(ModelError::EquilibriumNotConverged {
                iterations,
                residual: norm.to_f64_lossy(),
            });
        }
        iterations += 1;

        let mut jac = vec![T::zero(); m * m];
        let mut rp = vec![T::zero(); m];
        let mut rm = vec![T::zero(); m];
        let eps = T::epsilon().cbrt();
        for j in 0..m {
            let h = eps * T::one().max(z[j].abs());
            let orig = z[j];
            z[j] = orig + h;
            residual(&z, &mut rp);
            z[j] = orig - h;
            residual(&z, &mut rm);
            z[j] = orig;
            for i in 0..m {
                jac[i * m + j] = (rp[i] - rm[i]) / (h + h);
            }
        }
        let mut step: Vec<T> = r.iter().map(|v| -*v).collect();
        if !lu_solve(&mut jac, &mut step, m) {
            return Err(ModelError::EquilibriumNotConverged {
                iterations,
                residual: norm.to_f64_lossy(),
            });
        }

        // backtracking on the residual norm
        let mut lambda = T::one();
        let mut trial = z.clone();
        let mut rt = vec![T::zero(); m];
        loop {
            for i in 0..m {
                trial[i] = z[i] + lambda * step[i];
            }
            residual(&trial, &mut rt);
            let nt = inf_norm(&rt);
            if nt < norm || lambda < T::lit(1e-4) {
                z.copy_from_slice(&trial);
                r.copy_from_slice(&rt);
                norm = nt;
                break;
            }
            lambda = lambda * T::lit(0.5);
        }
    }

    let setpoints = Setpoints {
        vref: z[n],
        pref: z[n + 1],
    };
    z.truncate(n);
    let state = SimState {
        x: z,
        t: T::zero(),
        inputs,
        setpoints,
    };
    let mut scratch = vec![T::zero(); n];
    let sig = model.rhs(&state.x, inputs, setpoints, &mut scratch);
    check_limits(model, sig.efd, sig.pm)?;
    Ok(state)
}

/// Analytic initial guess from the terminal phasor quantities. Exact when
/// saturation is off.
fn seed<T: Real>(model: &UnitModel<T>, v: T, theta: T, p: T, q: T) -> Result<(Vec<T>, Setpoints<T>, T), ModelError> {
    let mc = &model.machine;
    let (s, c) = theta.sin_cos();
    let (vr, vi) = (v * c, v * s);
    // I = conj(S / V)
    let ir = (p * c + q * s) / v;
    let ii = (p * s - q * c) / v;
    let er = vr - mc.xq * ii;
    let ei = vi + mc.xq * ir;
    let delta = ei.atan2(er);
    let (rs, rc) = (-(delta - T::lit(FRAC_PI_2))).sin_cos();
    let rotate = |a: T, b: T| (a * rc - b * rs, a * rs + b * rc);
    let (vd, vq) = rotate(vr, vi);
    let (id, iq) = rotate(ir, ii);

    let efd = vq + mc.xd * id;
    let eqp = efd - (mc.xd - mc.xdp) * id;
    let psi1d = eqp - (mc.xdp - mc.xl) * id;
    let edp = (mc.xq - mc.xqp) * iq;
    let psi2q = -edp - (mc.xqp - mc.xl) * iq;
    let qe = vq * id - vd * iq;

    let lay = model.layout();
    let mut x = vec![T::zero(); model.dim()];
    x[StateLayout::DELTA] = delta;
    x[StateLayout::EQP] = eqp;
    x[StateLayout::PSI1D] = psi1d;
    x[StateLayout::EDP] = edp;
    x[StateLayout::PSI2Q] = psi2q;

    let ex = &model.exciter;
    let ka = match ex.regulator {
        super::Block::Lag { k, .. } => k,
        _ => unreachable!("regulator is a lag block"),
    };
    let u = efd / ka;
    if let Some(i) = lay.lead_lag {
        x[i] = ex.lead_lag.steady_state(u);
    }
    if let Some(i) = lay.regulator {
        x[i] = efd;
    }
    x[lay.rate_feedback] = efd;
    x[lay.governor] = p;

    let vc = v + ex.xc * qe / v;
    let sp = Setpoints { vref: vc + u, pref: p };
    if x.iter().any(|v| !v.is_finite()) || !sp.vref.is_finite() {
        return Err(ModelError::Infeasible("initial guess is not finite".into()));
    }
    Ok((x, sp, efd))
}

fn check_limits<T: Real>(model: &UnitModel<T>, efd: T, pm: T) -> Result<(), ModelError> {
    if let super::Block::Lag { limits: Some((lo, hi)), .. } = model.exciter.regulator {
        if !(efd > lo && efd < hi) {
            return Err(ModelError::Infeasible(format!(
                "field voltage {} outside regulator limits [{}, {}]",
                efd.to_f64_lossy(),
                lo.to_f64_lossy(),
                hi.to_f64_lossy()
            )));
        }
    }
    if let super::Block::LimitedIntegrator { lo, hi, .. } = model.governor.valve {
        if !(pm >= lo && pm <= hi) {
            return Err(ModelError::Infeasible(format!(
                "mechanical power {} outside governor limits [{}, {}]",
                pm.to_f64_lossy(),
                lo.to_f64_lossy(),
                hi.to_f64_lossy()
            )));
        }
    }
    Ok(())
}

fn inf_norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, x| {
        if x.is_nan() {
            T::nan()
        } else {
            acc.max(x.abs())
        }
    })
}

/// Solves `a x = b` in place (row-major `n x n`), partial pivoting.
/// Returns false for a numerically singular matrix.
fn lu_solve<T: Real>(a: &mut [T], b: &mut [T], n: usize) -> bool {
    for k in 0..n {
        let mut piv = k;
        let mut best = a[k * n + k].abs();
        for i in k + 1..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if !(best > T::min_positive_value()) {
            return false;
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            b.swap(k, piv);
        }
        let d = a[k * n + k];
        for i in k + 1..n {
            let f = a[i * n + k] / d;
            if f == T::zero() {
                continue;
            }
            for j in k..n {
                a[i * n + j] = a[i * n + j] - f * a[k * n + j];
            }
            b[i] = b[i] - f * b[k];
        }
    }
    for k in (0..n).rev() {
        let mut s = b[k];
        for j in k + 1..n {
            s = s - a[k * n + j] * b[j];
        }
        b[k] = s / a[k * n + k];
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdyn::{compute_output, derivatives, step_rk4, UnitConfig};

    fn model(cfg: &UnitConfig) -> UnitModel<f64> {
        UnitModel::from_config(cfg).unwrap()
    }

    #[test]
    fn lu_solves_small_system() {
        let mut a: Vec<f64> = vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 2.0, 0.0, 3.0];
        let mut b: Vec<f64> = vec![7.0, 3.0, 11.0];
        assert!(lu_solve(&mut a, &mut b, 3));
        for (got, want) in b.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let mut sing = vec![1.0, 2.0, 2.0, 4.0];
        assert!(!lu_solve(&mut sing, &mut [1.0, 2.0], 2));
    }

    #[test]
    fn default_unit_equilibrium_is_a_fixed_point() {
        let m = model(&UnitConfig::default());
        let s = init_equilibrium(&m, 1.0, 0.0, 0.8, 0.2).unwrap();
        let dx = derivatives(&m, &s).unwrap();
        assert!(dx.iter().all(|v| v.abs() < 1e-8), "{dx:?}");
        let (p, q) = compute_output(&m, &s).unwrap();
        assert!((p - 0.8).abs() < 1e-8 && (q - 0.2).abs() < 1e-8);
        let next = step_rk4(&m, &s, 0.01).unwrap();
        for (a, b) in s.x.iter().zip(&next.x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_machine_converges_by_newton() {
        let mut cfg = UnitConfig::default();
        cfg.params.set_value("S10", 0.05).unwrap();
        cfg.params.set_value("S12", 0.3).unwrap();
        let m = model(&cfg);
        let s = init_equilibrium(&m, 1.02, 0.3, 0.9, 0.1).unwrap();
        let dx = derivatives(&m, &s).unwrap();
        assert!(dx.iter().all(|v| v.abs() < 1e-8), "{dx:?}");
        let (p, q) = compute_output(&m, &s).unwrap();
        assert!((p - 0.9).abs() < 1e-8 && (q - 0.1).abs() < 1e-8);
    }

    #[test]
    fn open_circuit_angle_matches_terminal() {
        let m = model(&UnitConfig::default());
        let s = init_equilibrium(&m, 1.0, 0.25, 0.0, 0.0).unwrap();
        assert!((s.x[StateLayout::DELTA] - 0.25).abs() < 1e-10);
        assert!(s.setpoints.pref.abs() < 1e-12);
        let st = m.machine.stator(&s.x, 1.0, 0.25);
        assert!(st.id.abs() < 1e-10 && st.iq.abs() < 1e-10);
    }

    #[test]
    fn rejects_nonpositive_voltage_and_infeasible_field() {
        let m = model(&UnitConfig::default());
        assert!(matches!(
            init_equilibrium(&m, 0.0, 0.0, 0.8, 0.2),
            Err(ModelError::NonPositiveVoltage(_))
        ));
        let r = init_equilibrium(&m, 1.0, 0.0, 0.8, 8.0);
        assert!(matches!(
            r,
            Err(ModelError::Infeasible(_))
        ), "{r:?}");
        assert!(matches!(
            init_equilibrium(&m, 1.0, 0.0, 2.0, 0.0),
            Err(ModelError::Infeasible(_))
        ));
    }

    #[test]
    fn f32_model_reaches_relaxed_tolerance() {
        let m = UnitModel::<f32>::from_config(&UnitConfig::default()).unwrap();
        let s = init_equilibrium(&m, 1.0f32, 0.0, 0.8, 0.2).unwrap();
        let (p, q) = compute_output(&m, &s).unwrap();
        assert!((p - 0.8).abs() < 1e-4 && (q - 0.2).abs() < 1e-4);
    }
}
