//! Random-intercept Gaussian model: y_ij = eta_i + noise, eta_i ~ N(mu, omega^2).
//!
//! Fully conjugate, so the marginal likelihood, the per-subject posterior,
//! and the population MLE all have closed forms. This is the main exactness
//! oracle for the fitting stack.

use super::{normal_logpdf, Domain, EtaTransform, EvalCtx, Model, PriorCov, Subject, LN_2PI};
use crate::ad::Scalar;
use crate::error::{Error, Result};
use crate::rng::standard_normal_vec;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::RngCore;

#[derive(Debug, Clone, Copy, Default)]
pub struct LinearGaussian;

const MU: usize = 0;
const OMEGA: usize = 1;
const SIGMA: usize = 2;

impl Model for LinearGaussian {
    fn name(&self) -> &'static str {
        "linear_gaussian"
    }
    fn n_theta(&self) -> usize {
        3
    }
    fn n_eta(&self) -> usize {
        1
    }
    fn theta_names(&self) -> Vec<String> {
        vec!["mu".to_string(), "omega".to_string(), "sigma".to_string()]
    }
    fn theta_domains(&self) -> Vec<Domain> {
        vec![Domain::Free, Domain::Positive, Domain::Positive]
    }
    fn theta_init(&self) -> Vec<f64> {
        vec![1.0, 1.0, 0.5]
    }
    fn eta_transforms(&self) -> Vec<EtaTransform> {
        vec![EtaTransform::Identity]
    }
    fn response_names(&self) -> Vec<&'static str> {
        vec!["y"]
    }

    fn prior_moments<S: Scalar>(&self, theta: &[S]) -> Result<(Vec<S>, PriorCov<S>)> {
        Ok((
            vec![theta[MU]],
            PriorCov::Diag(vec![theta[OMEGA] * theta[OMEGA]]),
        ))
    }

    fn conditional_loglik<S: Scalar>(
        &self,
        subject: &Subject,
        eta: &[S],
        theta: &[S],
        _ctx: &EvalCtx,
    ) -> Result<S> {
        super::expect_responses(subject, 1, "linear_gaussian")?;
        let sigma = theta[SIGMA];
        let mut ll = S::zero();
        for y in subject.observations[0].iter().flatten() {
            ll = ll + normal_logpdf(*y, eta[0], sigma);
        }
        Ok(ll)
    }

    fn closed_form_loglik(&self, subject: &Subject, theta: &[f64]) -> Option<Result<f64>> {
        Some(marginal_loglik(subject, theta))
    }

    fn simulate(
        &self,
        design: &Subject,
        eta: &[f64],
        theta: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<Option<f64>>>> {
        let noise = standard_normal_vec(rng, design.observation_times.len());
        Ok(vec![noise
            .iter()
            .map(|e| Some(eta[0] + theta[SIGMA] * e))
            .collect()])
    }
}

/// Exact log p(y_i | theta). The covariance sigma^2 I + omega^2 J has one
/// eigenvalue sigma^2 + n omega^2 (mean direction) and n-1 copies of
/// sigma^2, which gives the determinant and the quadratic form directly.
fn marginal_loglik(subject: &Subject, theta: &[f64]) -> Result<f64> {
    let (mu, omega, sigma) = (theta[MU], theta[OMEGA], theta[SIGMA]);
    if !(omega > 0.0 && sigma > 0.0) {
        return Err(Error::domain("linear_gaussian scales must be positive"));
    }
    let ys: Vec<f64> = subject.observations[0].iter().flatten().copied().collect();
    let n = ys.len();
    if n == 0 {
        return Ok(0.0);
    }
    let nf = n as f64;
    let ybar = ys.iter().sum::<f64>() / nf;
    let ssw: f64 = ys.iter().map(|y| (y - ybar) * (y - ybar)).sum();
    let s2 = sigma * sigma;
    let lam = s2 + nf * omega * omega;
    let logdet = (nf - 1.0) * s2.ln() + lam.ln();
    let quad = ssw / s2 + nf * (ybar - mu) * (ybar - mu) / lam;
    Ok(-0.5 * (logdet + quad + nf * LN_2PI))
}

/// Exact per-subject posterior over eta given theta: N(mean, var) with
/// precision 1/omega^2 + n/sigma^2. Oracle for variational recovery tests.
pub fn exact_posterior(subject: &Subject, theta: &[f64]) -> (f64, f64) {
    let (mu, omega, sigma) = (theta[MU], theta[OMEGA], theta[SIGMA]);
    let ys: Vec<f64> = subject.observations[0].iter().flatten().copied().collect();
    let n = ys.len() as f64;
    let prec = 1.0 / (omega * omega) + n / (sigma * sigma);
    let var = 1.0 / prec;
    let mean = var * (mu / (omega * omega) + ys.iter().sum::<f64>() / (sigma * sigma));
    (mean, var)
}
