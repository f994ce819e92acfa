//! Warfarin PK/PD: first-order oral absorption into a one-compartment PK
//! with allometric weight scaling, an indirect-response turnover PD driven
//! by an Emax effect of the central concentration, a lagged depot dose, and
//! combined proportional/additive error on concentration plus additive error
//! on the PD response.
//!
//! Eight fixed effects carry log-normal (or, for the lag and Emax
//! multipliers, unit-median log-normal) inter-individual variability; dosing
//! is delayed per subject by `pop_lag * exp(lag effect)`.

use super::{normal_logpdf, Domain, EtaTransform, EvalCtx, Model, PriorCov, Subject};
use crate::ad::Scalar;
use crate::error::{Error, Result};
use crate::ode::{solve_rk4, solve_rk45, OdeEvent};
use crate::rng::standard_normal_vec;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::LN_2;
use rand::RngCore;

#[derive(Debug, Clone, Copy, Default)]
pub struct WarfarinPkpd;

const POP_CL: usize = 0;
const POP_V: usize = 1;
const POP_TABS: usize = 2;
const POP_LAG: usize = 3;
const POP_E0: usize = 4;
const POP_EMAX: usize = 5;
const POP_C50: usize = 6;
const POP_TOVER: usize = 7;
const OMEGA0: usize = 8;
const SIGMA_PROP: usize = 16;
const SIGMA_ADD: usize = 17;
const SIGMA_FX: usize = 18;

const DEPOT: usize = 0;
const CENTRAL: usize = 1;
const TURNOVER: usize = 2;

/// Individual dynamic parameters derived from constrained effects.
struct Individual<S> {
    cl: S,
    vc: S,
    ka: S,
    lag: S,
    emax: S,
    c50: S,
    kout: S,
    rin: S,
    e0: S,
}

fn individual<S: Scalar>(subject: &Subject, eta: &[S], theta: &[S]) -> Result<Individual<S>> {
    let wt = *subject.covariates.get("WT").ok_or_else(|| {
        Error::domain(format!(
            "warfarin_pkpd subject {}: missing covariate WT",
            subject.id
        ))
    })?;
    let fszv = S::constant(wt / 70.0);
    let fszcl = S::constant((wt / 70.0).powf(0.75));
    let e0 = eta[4];
    let kout = S::constant(LN_2) / eta[7];
    Ok(Individual {
        cl: fszcl * eta[0],
        vc: fszv * eta[1],
        ka: S::constant(LN_2) / eta[2],
        lag: theta[POP_LAG] * eta[3],
        emax: theta[POP_EMAX] * eta[5],
        c50: eta[6],
        kout,
        rin: e0 * kout,
        e0,
    })
}

fn events<S: Scalar>(subject: &Subject, p: &Individual<S>) -> Result<Vec<OdeEvent<S>>> {
    let mut out = Vec::with_capacity(subject.dose_events.len());
    for d in &subject.dose_events {
        let time = match d.lag_name.as_deref() {
            None => S::constant(d.time),
            Some("lag") => S::constant(d.time) + p.lag,
            Some(other) => {
                return Err(Error::domain(format!(
                    "warfarin_pkpd: unknown dose lag parameter '{other}'"
                )))
            }
        };
        out.push(OdeEvent {
            time,
            jumps: vec![(d.compartment, S::constant(d.amount))],
        });
    }
    Ok(out)
}

fn rhs<S: Scalar>(p: &Individual<S>) -> impl FnMut(S, &[S], &mut [S]) + '_ {
    |_t, y, dy| {
        let cp = y[CENTRAL] / p.vc;
        let ratein = p.ka * y[DEPOT];
        dy[DEPOT] = -ratein;
        dy[CENTRAL] = ratein - p.cl * cp;
        dy[TURNOVER] = p.rin * (S::one() + p.emax * cp / (p.c50 + cp)) - p.kout * y[TURNOVER];
    }
}

/// Concentration and turnover at the observation times.
fn curves<S: Scalar>(
    subject: &Subject,
    eta: &[S],
    theta: &[S],
    steps: usize,
) -> Result<(Vec<S>, Vec<S>)> {
    let p = individual(subject, eta, theta)?;
    let saves: Vec<S> = subject
        .observation_times
        .iter()
        .map(|t| S::constant(*t))
        .collect();
    let ev = events(subject, &p)?;
    let y0 = [S::zero(), S::zero(), p.e0];
    let sol = solve_rk4(rhs(&p), &y0, S::zero(), &saves, &ev, steps)?;
    Ok((
        sol.states.iter().map(|y| y[CENTRAL] / p.vc).collect(),
        sol.states.iter().map(|y| y[TURNOVER]).collect(),
    ))
}

fn loglik_at_curves<S: Scalar>(subject: &Subject, cp: &[S], tv: &[S], theta: &[S]) -> S {
    let (sp, sa, sfx) = (theta[SIGMA_PROP], theta[SIGMA_ADD], theta[SIGMA_FX]);
    let mut ll = S::zero();
    for (c, y) in cp.iter().zip(&subject.observations[0]) {
        if let Some(y) = y {
            let sd = (sp * *c * (sp * *c) + sa * sa).sqrt();
            ll = ll + normal_logpdf(*y, *c, sd);
        }
    }
    for (t, y) in tv.iter().zip(&subject.observations[1]) {
        if let Some(y) = y {
            ll = ll + normal_logpdf(*y, *t, sfx);
        }
    }
    ll
}

impl Model for WarfarinPkpd {
    fn name(&self) -> &'static str {
        "warfarin_pkpd"
    }
    fn n_theta(&self) -> usize {
        19
    }
    fn n_eta(&self) -> usize {
        8
    }
    fn theta_names(&self) -> Vec<String> {
        [
            "pop_cl", "pop_v", "pop_tabs", "pop_lag", "pop_e0", "pop_emax", "pop_c50",
            "pop_tover", "omega_cl", "omega_v", "omega_tabs", "omega_lag", "omega_e0",
            "omega_emax", "omega_c50", "omega_tover", "sigma_prop", "sigma_add", "sigma_fx",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }
    fn theta_domains(&self) -> Vec<Domain> {
        let mut d = vec![Domain::Positive; 19];
        d[POP_EMAX] = Domain::Free;
        d
    }
    fn theta_init(&self) -> Vec<f64> {
        vec![
            0.134, 8.11, 0.523, 0.1, 100.0, -1.0, 1.0, 14.0, // population values
            0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, // effect scales
            0.00752, 0.0661, 0.01, // residual scales
        ]
    }
    fn eta_transforms(&self) -> Vec<EtaTransform> {
        vec![EtaTransform::Log; 8]
    }
    fn response_names(&self) -> Vec<&'static str> {
        vec!["conc", "pca"]
    }
    fn dose_lag_name(&self, compartment: usize) -> Option<&'static str> {
        (compartment == DEPOT).then_some("lag")
    }

    fn prior_moments<S: Scalar>(&self, theta: &[S]) -> Result<(Vec<S>, PriorCov<S>)> {
        let mean = vec![
            theta[POP_CL].ln(),
            theta[POP_V].ln(),
            theta[POP_TABS].ln(),
            S::zero(),
            theta[POP_E0].ln(),
            S::zero(),
            theta[POP_C50].ln(),
            theta[POP_TOVER].ln(),
        ];
        let vars = (0..8).map(|k| theta[OMEGA0 + k] * theta[OMEGA0 + k]).collect();
        Ok((mean, PriorCov::Diag(vars)))
    }

    fn conditional_loglik<S: Scalar>(
        &self,
        subject: &Subject,
        eta: &[S],
        theta: &[S],
        ctx: &EvalCtx,
    ) -> Result<S> {
        super::expect_responses(subject, 2, "warfarin_pkpd")?;
        let (cp, tv) = curves(subject, eta, theta, ctx.ode_steps)?;
        Ok(loglik_at_curves(subject, &cp, &tv, theta))
    }

    fn conditional_loglik_reference(
        &self,
        subject: &Subject,
        eta: &[f64],
        theta: &[f64],
        rtol: f64,
        atol: f64,
    ) -> Option<Result<f64>> {
        Some((|| {
            let p = individual(subject, eta, theta)?;
            let ev = events(subject, &p)?;
            let y0 = [0.0, 0.0, p.e0];
            let sol = solve_rk45(
                rhs(&p),
                &y0,
                0.0,
                &subject.observation_times,
                &ev,
                rtol,
                atol,
            )?;
            let cp: Vec<f64> = sol.states.iter().map(|y| y[CENTRAL] / p.vc).collect();
            let tv: Vec<f64> = sol.states.iter().map(|y| y[TURNOVER]).collect();
            Ok(loglik_at_curves(subject, &cp, &tv, theta))
        })())
    }

    fn simulate(
        &self,
        design: &Subject,
        eta: &[f64],
        theta: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<Option<f64>>>> {
        let (cp, tv) = curves(design, eta, theta, EvalCtx::default().ode_steps)?;
        let (sp, sa, sfx) = (theta[SIGMA_PROP], theta[SIGMA_ADD], theta[SIGMA_FX]);
        let noise_c = standard_normal_vec(rng, cp.len());
        let noise_p = standard_normal_vec(rng, tv.len());
        let conc = cp
            .iter()
            .zip(&noise_c)
            .map(|(c, e)| {
                let sd = ((sp * c) * (sp * c) + sa * sa).sqrt();
                Some(c + sd * e)
            })
            .collect();
        let pca = tv.iter().zip(&noise_p).map(|(t, e)| Some(t + sfx * e)).collect();
        Ok(vec![conc, pca])
    }
}
