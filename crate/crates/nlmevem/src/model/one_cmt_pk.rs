//! One-compartment oral-absorption pharmacokinetics with log-normal
//! inter-individual variability on Ka, CL, and V and additive residual error
//! on the central concentration.
//!
//! The likelihood integrates the two-state system numerically (exercising
//! dose handling exactly as larger models do); the superposition solution
//! [`analytic_concentration`] exists for oracle comparisons.

use super::{normal_logpdf, Domain, EtaTransform, EvalCtx, Model, PriorCov, Subject};
use crate::ad::Scalar;
use crate::error::Result;
use crate::ode::{solve_rk4, solve_rk45, OdeEvent};
use crate::rng::standard_normal_vec;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::RngCore;

#[derive(Debug, Clone, Copy, Default)]
pub struct OneCmtPk;

const POP_KA: usize = 0;
const POP_CL: usize = 1;
const POP_V: usize = 2;
const OMEGA0: usize = 3;
const SIGMA: usize = 6;

const DEPOT: usize = 0;
const CENTRAL: usize = 1;

impl OneCmtPk {
    /// Central concentrations at the subject's observation times for given
    /// individual (Ka, CL, V), via the fixed-step integrator.
    fn concentrations<S: Scalar>(
        &self,
        subject: &Subject,
        eta: &[S],
        steps: usize,
    ) -> Result<Vec<S>> {
        let (ka, cl, v) = (eta[0], eta[1], eta[2]);
        let ke = cl / v;
        let saves: Vec<S> = subject
            .observation_times
            .iter()
            .map(|t| S::constant(*t))
            .collect();
        let events: Vec<OdeEvent<S>> = subject
            .dose_events
            .iter()
            .map(|d| OdeEvent {
                time: S::constant(d.time),
                jumps: vec![(d.compartment, S::constant(d.amount))],
            })
            .collect();
        let sol = solve_rk4(
            |_t, y: &[S], dy: &mut [S]| {
                let absorb = ka * y[DEPOT];
                dy[DEPOT] = -absorb;
                dy[CENTRAL] = absorb - ke * y[CENTRAL];
            },
            &[S::zero(), S::zero()],
            S::zero(),
            &saves,
            &events,
            steps,
        )?;
        Ok(sol.states.iter().map(|y| y[CENTRAL] / v).collect())
    }
}

impl Model for OneCmtPk {
    fn name(&self) -> &'static str {
        "one_cmt_pk"
    }
    fn n_theta(&self) -> usize {
        7
    }
    fn n_eta(&self) -> usize {
        3
    }
    fn theta_names(&self) -> Vec<String> {
        vec![
            "pop_ka".to_string(),
            "pop_cl".to_string(),
            "pop_v".to_string(),
            "omega_ka".to_string(),
            "omega_cl".to_string(),
            "omega_v".to_string(),
            "sigma".to_string(),
        ]
    }
    fn theta_domains(&self) -> Vec<Domain> {
        vec![Domain::Positive; 7]
    }
    fn theta_init(&self) -> Vec<f64> {
        vec![1.0, 0.3, 5.0, 0.2, 0.2, 0.2, 0.5]
    }
    fn eta_transforms(&self) -> Vec<EtaTransform> {
        vec![EtaTransform::Log; 3]
    }
    fn response_names(&self) -> Vec<&'static str> {
        vec!["conc"]
    }

    fn prior_moments<S: Scalar>(&self, theta: &[S]) -> Result<(Vec<S>, PriorCov<S>)> {
        let mean = vec![
            theta[POP_KA].ln(),
            theta[POP_CL].ln(),
            theta[POP_V].ln(),
        ];
        let vars = (0..3).map(|k| theta[OMEGA0 + k] * theta[OMEGA0 + k]).collect();
        Ok((mean, PriorCov::Diag(vars)))
    }

    fn conditional_loglik<S: Scalar>(
        &self,
        subject: &Subject,
        eta: &[S],
        theta: &[S],
        ctx: &EvalCtx,
    ) -> Result<S> {
        super::expect_responses(subject, 1, "one_cmt_pk")?;
        let conc = self.concentrations(subject, eta, ctx.ode_steps)?;
        let sigma = theta[SIGMA];
        let mut ll = S::zero();
        for (c, y) in conc.iter().zip(&subject.observations[0]) {
            if let Some(y) = y {
                ll = ll + normal_logpdf(*y, *c, sigma);
            }
        }
        Ok(ll)
    }

    fn conditional_loglik_reference(
        &self,
        subject: &Subject,
        eta: &[f64],
        theta: &[f64],
        rtol: f64,
        atol: f64,
    ) -> Option<Result<f64>> {
        Some(reference_loglik(subject, eta, theta, rtol, atol))
    }

    fn simulate(
        &self,
        design: &Subject,
        eta: &[f64],
        theta: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<Option<f64>>>> {
        let conc = self.concentrations(design, eta, EvalCtx::default().ode_steps)?;
        let noise = standard_normal_vec(rng, conc.len());
        Ok(vec![conc
            .iter()
            .zip(&noise)
            .map(|(c, e)| Some(c + theta[SIGMA] * e))
            .collect()])
    }
}

fn reference_loglik(
    subject: &Subject,
    eta: &[f64],
    theta: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<f64> {
    let (ka, cl, v) = (eta[0], eta[1], eta[2]);
    let ke = cl / v;
    let events: Vec<OdeEvent<f64>> = subject
        .dose_events
        .iter()
        .map(|d| OdeEvent {
            time: d.time,
            jumps: vec![(d.compartment, d.amount)],
        })
        .collect();
    let sol = solve_rk45(
        |_t, y: &[f64], dy: &mut [f64]| {
            let absorb = ka * y[DEPOT];
            dy[DEPOT] = -absorb;
            dy[CENTRAL] = absorb - ke * y[CENTRAL];
        },
        &[0.0, 0.0],
        0.0,
        &subject.observation_times,
        &events,
        rtol,
        atol,
    )?;
    let mut ll = 0.0;
    for (y, state) in subject.observations[0].iter().zip(&sol.states) {
        if let Some(y) = y {
            ll += normal_logpdf(*y, state[CENTRAL] / v, theta[SIGMA]);
        }
    }
    Ok(ll)
}

/// Exact central concentration under bolus-into-depot superposition:
/// each dose A at time tau contributes
/// `A/V * Ka/(Ka-ke) * (exp(-ke dt) - exp(-Ka dt))` for dt = t - tau >= 0.
pub fn analytic_concentration(t: f64, doses: &[(f64, f64)], ka: f64, cl: f64, v: f64) -> f64 {
    let ke = cl / v;
    let mut c = 0.0;
    for (tau, amount) in doses {
        let dt = t - tau;
        if dt < 0.0 {
            continue;
        }
        c += amount / v * ka / (ka - ke) * ((-ke * dt).exp() - (-ka * dt).exp());
    }
    c
}
