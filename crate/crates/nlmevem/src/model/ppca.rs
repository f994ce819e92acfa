//! Probabilistic principal component analysis with a 5-dimensional response
//! and a 2-dimensional latent effect per subject.
//!
//! Each subject contributes one observation vector, stored as the values of
//! a single response at integer times 0..4 so it fits the longitudinal data
//! layout. The latent posterior and the marginal are Gaussian in closed
//! form, giving an exact recovery oracle for the variational family.

use super::{normal_logpdf, Domain, EtaTransform, EvalCtx, Model, PriorCov, Subject, LN_2PI};
use crate::ad::Scalar;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::standard_normal_vec;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::RngCore;

pub const N_OUT: usize = 5;
pub const N_LATENT: usize = 2;

/// Loading matrix rows first (w_t_k, row-major), then the mean vector, then
/// the noise scale.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ppca;

const W0: usize = 0;
const MU0: usize = N_OUT * N_LATENT;
const SIGMA: usize = MU0 + N_OUT;

fn w<T: Copy>(theta: &[T], t: usize, k: usize) -> T {
    theta[W0 + t * N_LATENT + k]
}

impl Model for Ppca {
    fn name(&self) -> &'static str {
        "ppca"
    }
    fn n_theta(&self) -> usize {
        SIGMA + 1
    }
    fn n_eta(&self) -> usize {
        N_LATENT
    }
    fn theta_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for t in 0..N_OUT {
            for k in 0..N_LATENT {
                names.push(format!("w_{t}_{k}"));
            }
        }
        for t in 0..N_OUT {
            names.push(format!("mu_{t}"));
        }
        names.push("sigma".to_string());
        names
    }
    fn theta_domains(&self) -> Vec<Domain> {
        let mut d = vec![Domain::Free; SIGMA];
        d.push(Domain::Positive);
        d
    }
    fn theta_init(&self) -> Vec<f64> {
        let mut t = vec![
            0.9, -0.3, //
            0.4, 0.8, //
            -0.7, 0.5, //
            0.2, -0.6, //
            0.5, 0.1,
        ];
        t.extend_from_slice(&[0.5, -0.2, 0.3, -0.4, 0.1]);
        t.push(0.5);
        t
    }
    fn eta_transforms(&self) -> Vec<EtaTransform> {
        vec![EtaTransform::Identity; N_LATENT]
    }
    fn response_names(&self) -> Vec<&'static str> {
        vec!["y"]
    }

    fn prior_moments<S: Scalar>(&self, _theta: &[S]) -> Result<(Vec<S>, PriorCov<S>)> {
        Ok((
            vec![S::zero(); N_LATENT],
            PriorCov::Diag(vec![S::one(); N_LATENT]),
        ))
    }

    fn conditional_loglik<S: Scalar>(
        &self,
        subject: &Subject,
        eta: &[S],
        theta: &[S],
        _ctx: &EvalCtx,
    ) -> Result<S> {
        super::expect_responses(subject, 1, "ppca")?;
        if subject.observation_times.len() > N_OUT {
            return Err(Error::dimension(
                format!("ppca subject {}", subject.id),
                N_OUT,
                subject.observation_times.len(),
            ));
        }
        let sigma = theta[SIGMA];
        let mut ll = S::zero();
        for (t, y) in subject.observations[0].iter().enumerate() {
            let Some(y) = y else { continue };
            let mut mean = theta[MU0 + t];
            for (k, e) in eta.iter().enumerate() {
                mean = mean + w(theta, t, k) * *e;
            }
            ll = ll + normal_logpdf(*y, mean, sigma);
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
        let n = design.observation_times.len();
        if n > N_OUT {
            return Err(Error::dimension("ppca design times", N_OUT, n));
        }
        let noise = standard_normal_vec(rng, n);
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            let mut mean = theta[MU0 + t];
            for (k, e) in eta.iter().enumerate() {
                mean += w(theta, t, k) * e;
            }
            out.push(Some(mean + theta[SIGMA] * noise[t]));
        }
        Ok(vec![out])
    }
}

/// Marginal y ~ N(mu, W W^T + sigma^2 I) over the present entries.
fn marginal_loglik(subject: &Subject, theta: &[f64]) -> Result<f64> {
    let present: Vec<(usize, f64)> = subject.observations[0]
        .iter()
        .enumerate()
        .filter_map(|(t, y)| y.map(|v| (t, v)))
        .collect();
    let p = present.len();
    if p == 0 {
        return Ok(0.0);
    }
    let s2 = theta[SIGMA] * theta[SIGMA];
    let mut cov = vec![0.0; linalg::packed_len(p)];
    let mut resid = Vec::with_capacity(p);
    for (i, (ti, yi)) in present.iter().enumerate() {
        for (j, (tj, _)) in present.iter().take(i + 1).enumerate() {
            let mut c = if i == j { s2 } else { 0.0 };
            for k in 0..N_LATENT {
                let (wi, wj): (f64, f64) = (w(theta, *ti, k), w(theta, *tj, k));
                c += wi * wj;
            }
            cov[linalg::lt(i, j)] = c;
        }
        resid.push(yi - theta[MU0 + ti]);
    }
    let l = linalg::chol_packed(p, &cov)?;
    let z = linalg::fwd_solve(p, &l, &resid);
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let logdet: f64 = 2.0 * linalg::log_det_lower(p, &l);
    Ok(-0.5 * (quad + logdet + p as f64 * LN_2PI))
}

/// Closed-form latent posterior N(M^-1 W^T (y - mu), sigma^2 M^-1) with
/// M = W^T W + sigma^2 I, over present entries. Returns (mean, covariance)
/// with the 2x2 covariance row-major.
pub fn exact_posterior(subject: &Subject, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s2 = theta[SIGMA] * theta[SIGMA];
    // M = W^T W + s2 I (2x2), b = W^T (y - mu)
    let mut m = [s2, 0.0, 0.0, s2];
    let mut b = [0.0, 0.0];
    for (t, y) in subject.observations[0].iter().enumerate() {
        let Some(y) = y else { continue };
        let (w0, w1): (f64, f64) = (w(theta, t, 0), w(theta, t, 1));
        m[0] += w0 * w0;
        m[1] += w0 * w1;
        m[2] += w1 * w0;
        m[3] += w1 * w1;
        let r = y - theta[MU0 + t];
        b[0] += w0 * r;
        b[1] += w1 * r;
    }
    let det = m[0] * m[3] - m[1] * m[2];
    let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];
    let mean = vec![inv[0] * b[0] + inv[1] * b[1], inv[2] * b[0] + inv[3] * b[1]];
    let cov = inv.iter().map(|v| s2 * v).collect();
    (mean, cov)
}
