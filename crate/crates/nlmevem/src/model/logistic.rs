//! Bernoulli responses with one normally distributed random intercept on the
//! logit scale. The marginal has no closed form but is a one-dimensional
//! integral, which makes this the reference case for Gauss-Hermite oracles.

use super::{Domain, EtaTransform, EvalCtx, Model, PriorCov, Subject};
use crate::ad::Scalar;
use crate::error::Result;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, RngCore};

#[derive(Debug, Clone, Copy, Default)]
pub struct Logistic1d;

impl Model for Logistic1d {
    fn name(&self) -> &'static str {
        "logistic_1d"
    }
    fn n_theta(&self) -> usize {
        2
    }
    fn n_eta(&self) -> usize {
        1
    }
    fn theta_names(&self) -> Vec<String> {
        vec!["mu".to_string(), "omega".to_string()]
    }
    fn theta_domains(&self) -> Vec<Domain> {
        vec![Domain::Free, Domain::Positive]
    }
    fn theta_init(&self) -> Vec<f64> {
        vec![0.5, 1.0]
    }
    fn eta_transforms(&self) -> Vec<EtaTransform> {
        vec![EtaTransform::Identity]
    }
    fn response_names(&self) -> Vec<&'static str> {
        vec!["y"]
    }

    fn prior_moments<S: Scalar>(&self, theta: &[S]) -> Result<(Vec<S>, PriorCov<S>)> {
        Ok((vec![theta[0]], PriorCov::Diag(vec![theta[1] * theta[1]])))
    }

    fn conditional_loglik<S: Scalar>(
        &self,
        subject: &Subject,
        eta: &[S],
        _theta: &[S],
        _ctx: &EvalCtx,
    ) -> Result<S> {
        super::expect_responses(subject, 1, "logistic_1d")?;
        // log Bernoulli(y; logistic(eta)) = y*eta - softplus(eta), stable
        // for large |eta|
        let e = eta[0];
        let sp = e.softplus();
        let mut ll = S::zero();
        for y in subject.observations[0].iter().flatten() {
            ll = ll + S::constant(*y) * e - sp;
        }
        Ok(ll)
    }

    fn simulate(
        &self,
        design: &Subject,
        eta: &[f64],
        _theta: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<Option<f64>>>> {
        let p = f64::logistic(eta[0]);
        Ok(vec![design
            .observation_times
            .iter()
            .map(|_| Some(if rng.gen::<f64>() < p { 1.0 } else { 0.0 }))
            .collect()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;

    #[test]
    fn loglik_matches_direct_bernoulli() {
        let s = Subject::new(
            "s",
            vec![0.0, 1.0, 2.0],
            vec![vec![Some(1.0), Some(0.0), Some(1.0)]],
            Vec::new(),
            BTreeMap::new(),
        )
        .unwrap();
        let eta = [0.7];
        let p = f64::logistic(0.7);
        let expect = p.ln() + (1.0 - p).ln() + p.ln();
        let got: f64 = Logistic1d
            .conditional_loglik(&s, &eta, &[0.5, 1.0], &EvalCtx::default())
            .unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn extreme_eta_stays_finite() {
        let s = Subject::new(
            "s",
            vec![0.0],
            vec![vec![Some(0.0)]],
            Vec::new(),
            BTreeMap::new(),
        )
        .unwrap();
        for e in [-600.0, 600.0] {
            let got: f64 = Logistic1d
                .conditional_loglik(&s, &[e], &[0.0, 1.0], &EvalCtx::default())
                .unwrap();
            assert!(got.is_finite(), "eta {e} -> {got}");
        }
    }
}
