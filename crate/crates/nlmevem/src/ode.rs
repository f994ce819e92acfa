//! Initial value problems with dosing events, solved by fixed-step RK4
//! generic over the scalar type.
//!
//! Differentiating the fixed discretization (rather than the continuous
//! solution) keeps gradients exactly consistent with the values the
//! likelihood sees. Event and save times are segment boundaries, never
//! interior points, and segment step sizes are derived from the boundary
//! times themselves, so a parameter-dependent event time (an absorption lag,
//! say) contributes its derivative through h.
//!
//! The adaptive Dormand-Prince pair [`solve_rk45`] is the plain-`f64`
//! accuracy reference used to choose frozen step counts; it never
//! participates in differentiation.

use crate::ad::Scalar;
use crate::error::{Error, Result};
use alloc::vec;
use alloc::vec::Vec;

/// An instantaneous state jump (dose) at a possibly parameter-dependent time.
#[derive(Debug, Clone)]
pub struct OdeEvent<S> {
    pub time: S,
    /// (state index, amount added)
    pub jumps: Vec<(usize, S)>,
}

/// Dense output at the requested save times.
#[derive(Debug, Clone)]
pub struct OdeSolution<S> {
    pub states: Vec<Vec<S>>,
}

enum Boundary {
    Save(usize),
    Event(usize),
}

/// Integrate `dy/dt = f(t, y)` from `t0` with `steps` RK4 steps per segment,
/// where segments are delimited by save times and event times sorted by
/// primal value. At a shared boundary the state is saved before events apply
/// (observations at a dose time are pre-dose).
pub fn solve_rk4<S, F>(
    mut f: F,
    y0: &[S],
    t0: S,
    save_times: &[S],
    events: &[OdeEvent<S>],
    steps: usize,
) -> Result<OdeSolution<S>>
where
    S: Scalar,
    F: FnMut(S, &[S], &mut [S]),
{
    assert!(steps >= 1, "steps per segment must be at least 1");
    let mut boundaries: Vec<(f64, Boundary)> = Vec::new();
    for (k, t) in save_times.iter().enumerate() {
        boundaries.push((t.primal(), Boundary::Save(k)));
    }
    for (k, e) in events.iter().enumerate() {
        boundaries.push((e.time.primal(), Boundary::Event(k)));
    }
    // Stable sort: saves were pushed first, so at equal times save precedes
    // event and events keep their input order.
    boundaries.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("non-finite boundary time"));

    let dim = y0.len();
    let mut y: Vec<S> = y0.to_vec();
    let mut t = t0;
    let mut states: Vec<Vec<S>> = vec![Vec::new(); save_times.len()];
    let mut k1 = vec![S::zero(); dim];
    let mut k2 = vec![S::zero(); dim];
    let mut k3 = vec![S::zero(); dim];
    let mut k4 = vec![S::zero(); dim];
    let mut work = vec![S::zero(); dim];
    let half = S::constant(0.5);
    let sixth = S::constant(1.0 / 6.0);
    let two = S::constant(2.0);

    let mut step_count = 0usize;
    for (bt, boundary) in boundaries {
        if bt < t0.primal() {
            return Err(Error::domain(
                "save or event time precedes the initial time",
            ));
        }
        let t_end = match &boundary {
            Boundary::Save(k) => save_times[*k],
            Boundary::Event(k) => events[*k].time,
        };
        if bt > t.primal() {
            let h = (t_end - t) * S::constant(1.0 / steps as f64);
            let t_seg = t;
            for i in 0..steps {
                let ti = t_seg + h * S::constant(i as f64);
                let th = ti + h * half;
                f(ti, &y, &mut k1);
                for d in 0..dim {
                    work[d] = y[d] + h * half * k1[d];
                }
                f(th, &work, &mut k2);
                for d in 0..dim {
                    work[d] = y[d] + h * half * k2[d];
                }
                f(th, &work, &mut k3);
                for d in 0..dim {
                    work[d] = y[d] + h * k3[d];
                }
                f(ti + h, &work, &mut k4);
                for d in 0..dim {
                    y[d] = y[d] + h * sixth * (k1[d] + two * k2[d] + two * k3[d] + k4[d]);
                }
                step_count += 1;
            }
            t = t_end;
            if y.iter().any(|v| !v.primal().is_finite()) {
                return Err(Error::NonFiniteState {
                    step: step_count,
                    t: t.primal(),
                });
            }
        }
        match boundary {
            Boundary::Save(k) => states[k] = y.clone(),
            Boundary::Event(k) => {
                for &(idx, amt) in &events[k].jumps {
                    y[idx] = y[idx] + amt;
                }
            }
        }
    }
    Ok(OdeSolution { states })
}

// Dormand-Prince 5(4) tableau.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Maximum accepted + rejected steps across the whole integration.
pub const RK45_MAX_STEPS: usize = 1_000_000;

/// Adaptive Dormand-Prince 5(4) reference solver, plain `f64`. Same boundary
/// conventions as [`solve_rk4`].
pub fn solve_rk45<F>(
    mut f: F,
    y0: &[f64],
    t0: f64,
    save_times: &[f64],
    events: &[OdeEvent<f64>],
    rtol: f64,
    atol: f64,
) -> Result<OdeSolution<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut boundaries: Vec<(f64, Boundary)> = Vec::new();
    for (k, t) in save_times.iter().enumerate() {
        boundaries.push((*t, Boundary::Save(k)));
    }
    for (k, e) in events.iter().enumerate() {
        boundaries.push((e.time, Boundary::Event(k)));
    }
    boundaries.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("non-finite boundary time"));

    let dim = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut states: Vec<Vec<f64>> = vec![Vec::new(); save_times.len()];
    let mut k: [Vec<f64>; 7] = core::array::from_fn(|_| vec![0.0; dim]);
    let mut work = vec![0.0; dim];
    let mut total_steps = 0usize;

    for (bt, boundary) in boundaries {
        if bt < t0 {
            return Err(Error::domain(
                "save or event time precedes the initial time",
            ));
        }
        let span = bt - t;
        if span > 0.0 {
            let mut h = span / 10.0;
            while t < bt {
                if total_steps > RK45_MAX_STEPS || h <= f64::EPSILON * t.abs().max(1.0) {
                    return Err(Error::SolverStalled {
                        steps: total_steps,
                        t,
                    });
                }
                h = h.min(bt - t);
                f(t, &y, &mut k[0]);
                for s in 0..6 {
                    for d in 0..dim {
                        let mut acc = 0.0;
                        for (j, kj) in k.iter().enumerate().take(s + 1) {
                            acc += A[s][j] * kj[d];
                        }
                        work[d] = y[d] + h * acc;
                    }
                    f(t + C[s] * h, &work, &mut k[s + 1]);
                }
                let mut err: f64 = 0.0;
                let mut y5 = vec![0.0; dim];
                for d in 0..dim {
                    let mut acc5 = 0.0;
                    let mut acc4 = 0.0;
                    for (j, kj) in k.iter().enumerate() {
                        acc5 += B5[j] * kj[d];
                        acc4 += B4[j] * kj[d];
                    }
                    y5[d] = y[d] + h * acc5;
                    let y4 = y[d] + h * acc4;
                    let scale = atol + rtol * y[d].abs().max(y5[d].abs());
                    let e = (y5[d] - y4) / scale;
                    err += e * e;
                }
                err = (err / dim as f64).sqrt();
                total_steps += 1;
                if err <= 1.0 {
                    t += h;
                    y = y5;
                    if !y.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFiniteState {
                            step: total_steps,
                            t,
                        });
                    }
                } else if !err.is_finite() {
                    h *= 0.1;
                    continue;
                }
                let factor = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
                h *= factor;
            }
            t = bt;
        }
        match boundary {
            Boundary::Save(kk) => states[kk] = y.clone(),
            Boundary::Event(kk) => {
                for &(idx, amt) in &events[kk].jumps {
                    y[idx] += amt;
                }
            }
        }
    }
    Ok(OdeSolution { states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{Dual, Scalar};

    fn decay<S: Scalar>(rate: S) -> impl FnMut(S, &[S], &mut [S]) {
        move |_t, y, dy| {
            dy[0] = -rate * y[0];
        }
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        // y' = -y, y(0) = 1, y(1) = e^-1
        let exact = (-1.0f64).exp();
        let err = |steps: usize| {
            let sol = solve_rk4(decay(1.0), &[1.0], 0.0, &[1.0], &[], steps).unwrap();
            (sol.states[0][0] - exact).abs()
        };
        let e8 = err(8);
        let e16 = err(16);
        let ratio = e8 / e16;
        assert!(
            (12.0..20.0).contains(&ratio),
            "order-4 halving should cut error ~16x, got {ratio}"
        );
    }

    #[test]
    fn dual_through_solver_matches_analytic_sensitivity() {
        // y' = -k y: dy(t)/dk = -t e^{-kt} at y0 = 1
        let k = Dual::<8, f64>::seeded(0.7, 0);
        let sol = solve_rk4(
            decay(k),
            &[Dual::constant(1.0)],
            Dual::constant(0.0),
            &[Dual::constant(2.0)],
            &[],
            64,
        )
        .unwrap();
        let y = sol.states[0][0];
        let exact = (-0.7 * 2.0f64).exp();
        assert!((y.value - exact).abs() < 1e-9);
        assert!((y.tangent[0] - (-2.0 * exact)).abs() < 1e-8, "{}", y.tangent[0]);
    }

    #[test]
    fn event_jump_and_pre_dose_save() {
        // Pure decay with a unit bolus at t = 1; observation exactly at t = 1
        // sees the pre-dose state.
        let events = [OdeEvent {
            time: 1.0,
            jumps: alloc::vec![(0usize, 1.0)],
        }];
        let sol = solve_rk4(decay(1.0), &[1.0], 0.0, &[1.0, 2.0], &events, 32).unwrap();
        let pre = (-1.0f64).exp();
        assert!((sol.states[0][0] - pre).abs() < 1e-6);
        let post = (pre + 1.0) * (-1.0f64).exp();
        assert!((sol.states[1][0] - post).abs() < 1e-6);
    }

    #[test]
    fn parameter_dependent_event_time_gradient() {
        // y' = -y, bolus of 1 at t = tau, observed at T = 3.
        // y(T) = e^{-T} + e^{-(T-tau)}, so dy/dtau = e^{-(T-tau)}.
        let tau = 1.3;
        let solve = |tau: Dual<8, f64>| {
            let events = alloc::vec![OdeEvent {
                time: tau,
                jumps: alloc::vec![(0usize, Dual::constant(1.0))],
            }];
            let sol = solve_rk4(
                decay(Dual::constant(1.0)),
                &[Dual::constant(1.0)],
                Dual::constant(0.0),
                &[Dual::constant(3.0)],
                &events,
                64,
            )
            .unwrap();
            sol.states[0][0]
        };
        let y = solve(Dual::seeded(tau, 0));
        let exact_grad = (-(3.0 - tau) as f64).exp();
        assert!((y.tangent[0] - exact_grad).abs() < 1e-6, "{}", y.tangent[0]);

        // and against a central finite difference of the same discretization
        let h = 1e-5;
        let fp = solve(Dual::constant(tau + h)).value;
        let fm = solve(Dual::constant(tau - h)).value;
        let fd = (fp - fm) / (2.0 * h);
        assert!((y.tangent[0] - fd).abs() < 1e-4 * (1.0 + fd.abs()));
    }

    #[test]
    fn rk45_matches_analytic_to_tolerance() {
        let sol = solve_rk45(decay(1.0), &[1.0], 0.0, &[0.5, 1.0, 4.0], &[], 1e-10, 1e-12).unwrap();
        for (t, s) in [0.5f64, 1.0, 4.0].iter().zip(sol.states.iter()) {
            let exact = (-*t).exp();
            assert!((s[0] - exact).abs() < 1e-9, "t = {t}");
        }
    }

    #[test]
    fn rk45_stalls_on_hopeless_problem() {
        // Finite-time blow-up: y' = y^2, y(0) = 1 explodes at t = 1.
        let res = solve_rk45(
            |_t, y: &[f64], dy: &mut [f64]| dy[0] = y[0] * y[0],
            &[1.0],
            0.0,
            &[2.0],
            &[],
            1e-8,
            1e-10,
        );
        assert!(res.is_err());
    }
}
