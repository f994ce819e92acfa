//! Population evidence lower bound: values and gradients.
//!
//! Each subject contributes a Monte Carlo ELBO over its own variational
//! distribution in standardized space,
//!
//! ```text
//! ELBO_i = (1/M) sum_j [ log p(y_i | eta_ij, theta)
//!                        + log N(u_ij; 0, I) - log q_i(u_ij) ]
//! ```
//!
//! where `u_ij = mu_i + L_i xi_j` is the reparameterized sample and
//! `eta_ij = transform_eta(u_ij)` its constrained image. Because q and the
//! standardized prior live in the same coordinates, the prior covariance
//! Jacobians cancel identically and never enter the objective.
//!
//! The population objective sums subject terms (scaled by `100/s` under
//! mini-batching) and optionally adds a log-prior over theta. Gradients with
//! respect to theta and every kappa_i come from differentiating exactly this
//! computation, so value and gradient always describe the same function.

use crate::ad::{self, AdMode, DiffFn, Scalar};
use crate::error::{Error, Result};
use crate::model::{EvalCtx, Model, Subject};
use crate::rng;
use crate::variational::{base_draws, std_normal_logpdf, GaussianQ, VariationalState};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// How Monte Carlo draws evolve across optimizer iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElboMode {
    /// Draws are fixed per subject for the whole fit (iteration key 0), so
    /// the objective is an exactly deterministic function of the parameters.
    DeterministicPresampled,
    /// Fresh draws every iteration (iteration key = optimizer step).
    StochasticResample,
}

#[derive(Debug, Clone)]
pub struct ElboConfig {
    /// Monte Carlo samples per subject; at least 1. Multiples of the
    /// random-effect count smooth the moment-matched draw sets.
    pub m: usize,
    pub mode: ElboMode,
    /// Mini-batch size as a percentage of the population, in (0, 100].
    /// Batch sums are scaled by `100 / minibatch_percent`.
    pub minibatch_percent: f64,
    /// Add log p(theta) to the objective (never scaled by mini-batching).
    pub map_prior: bool,
    pub seed: u64,
}

impl Default for ElboConfig {
    fn default() -> Self {
        ElboConfig {
            m: 15,
            mode: ElboMode::DeterministicPresampled,
            minibatch_percent: 100.0,
            map_prior: false,
            seed: 0,
        }
    }
}

impl ElboConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::config("ELBO samples per subject must be >= 1"));
        }
        if !(self.minibatch_percent > 0.0 && self.minibatch_percent <= 100.0) {
            return Err(Error::config(format!(
                "minibatch_percent must lie in (0, 100], got {}",
                self.minibatch_percent
            )));
        }
        Ok(())
    }

    /// Iteration component of the draw address under this mode.
    fn draw_iteration(&self, iteration: u64) -> u64 {
        match self.mode {
            ElboMode::DeterministicPresampled => 0,
            ElboMode::StochasticResample => iteration,
        }
    }
}

/// Value and gradient of the population objective at one point.
#[derive(Debug, Clone)]
pub struct ElboValueGrad {
    pub value: f64,
    pub grad_theta: Vec<f64>,
    /// One block per subject, aligned with the input order; zeros for
    /// subjects outside the evaluated batch.
    pub grad_kappa: Vec<Vec<f64>>,
}

/// One subject's Monte Carlo ELBO as a differentiable function of
/// `[theta, kappa_i]`, over a fixed set of base draws.
struct SubjectElbo<'a, M: Model + ?Sized> {
    model: &'a M,
    subject: &'a Subject,
    draws: &'a [Vec<f64>],
    n_theta: usize,
    r: usize,
    dense: bool,
    ctx: &'a EvalCtx,
}

impl<M: Model + ?Sized> DiffFn for SubjectElbo<'_, M> {
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
        let theta = &x[..self.n_theta];
        let kappa = &x[self.n_theta..];
        let q = GaussianQ::from_kappa(kappa, self.r, self.dense);
        // Prior geometry depends on theta only; hoist it out of the draw loop.
        let (prior_mean, prior_cov) = self
            .model
            .prior_moments(theta)
            .map_err(|e| point_failure(&self.subject.id, e))?;
        let chol = prior_cov
            .chol()
            .map_err(|e| point_failure(&self.subject.id, e))?;
        let transforms = self.model.eta_transforms();
        let mut acc = S::zero();
        for (j, xi_raw) in self.draws.iter().enumerate() {
            let xi: Vec<S> = xi_raw.iter().map(|&v| S::constant(v)).collect();
            let u = q.sample(&xi);
            let mut z = chol.matvec(&u);
            for (zi, mi) in z.iter_mut().zip(&prior_mean) {
                *zi = *zi + *mi;
            }
            let eta: Vec<S> = z
                .iter()
                .zip(&transforms)
                .map(|(zi, tr)| tr.inverse(*zi))
                .collect();
            let cond = self
                .model
                .conditional_loglik(self.subject, &eta, theta, self.ctx)
                .map_err(|e| point_failure(&self.subject.id, e))?;
            // Grouped so that q == N(0, I) cancels the density pair to an
            // exact 0.0 rather than to rounding noise.
            let term = cond + (std_normal_logpdf(&u) - q.logpdf(&u));
            if !term.primal().is_finite() {
                return Err(Error::non_finite(format!(
                    "ELBO term for subject {} draw {j}",
                    self.subject.id
                )));
            }
            acc = acc + term;
        }
        Ok(acc / S::constant(self.draws.len() as f64))
    }
}

/// Log p(theta) hook as a differentiable function; flat (0) when the model
/// declares no population-parameter prior.
struct ThetaPrior<'a, M: ?Sized>(&'a M);

impl<M: Model + ?Sized> DiffFn for ThetaPrior<'_, M> {
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
        match self.0.theta_prior_logpdf(x) {
            Some(lp) => lp,
            None => Ok(S::zero()),
        }
    }
}

/// Evaluation failures that depend on the point (solver divergence,
/// non-positive-definite covariance, overflow) become non-finite-objective
/// errors carrying the subject id, which optimizers treat as a rejected
/// step. Structural errors (wrong shapes, bad configuration) pass through.
fn point_failure(subject_id: &str, e: Error) -> Error {
    if e.is_point_dependent() {
        Error::non_finite(format!("subject {subject_id}: {e}"))
    } else {
        e
    }
}

/// Monte Carlo ELBO for one subject over caller-supplied base draws.
pub fn elbo_subject<M: Model + ?Sized>(
    model: &M,
    subject: &Subject,
    theta: &[f64],
    state: &VariationalState,
    draws: &[Vec<f64>],
    ctx: &EvalCtx,
) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::config("ELBO needs at least one draw"));
    }
    let f = SubjectElbo {
        model,
        subject,
        draws,
        n_theta: theta.len(),
        r: state.r(),
        dense: state.dense,
        ctx,
    };
    let mut x = theta.to_vec();
    state.pack_into(&mut x);
    f.eval::<f64>(&x)
}

/// Population objective: `(100/s) * sum_{i in batch} ELBO_i`, plus
/// log p(theta) when MAP is enabled. `batch` of `None` means every subject;
/// `iteration` addresses the draw streams in resampling mode.
pub fn elbo_population<M: Model + ?Sized>(
    model: &M,
    subjects: &[Subject],
    theta: &[f64],
    states: &[VariationalState],
    config: &ElboConfig,
    batch: Option<&[usize]>,
    iteration: u64,
    ctx: &EvalCtx,
) -> Result<f64> {
    config.validate()?;
    check_alignment(model, subjects, theta, states)?;
    let idx = resolve_batch(subjects.len(), batch)?;
    let it = config.draw_iteration(iteration);
    let per = crate::par::map_indexed(&idx, |i| {
        let draws = base_draws(
            config.seed,
            rng::subject_key(&subjects[i].id),
            it,
            config.m,
            states[i].r(),
        );
        elbo_subject(model, &subjects[i], theta, &states[i], &draws, ctx)
    })?;
    let mut total = 0.0;
    for v in &per {
        total += v;
    }
    total *= 100.0 / config.minibatch_percent;
    if config.map_prior {
        total += ad::value(&ThetaPrior(model), theta)?;
    }
    if !total.is_finite() {
        return Err(Error::non_finite("population ELBO"));
    }
    Ok(total)
}

/// Gradient of exactly the quantity [`elbo_population`] computes at the same
/// point, with respect to theta and every kappa in the batch.
pub fn elbo_gradient<M: Model + ?Sized>(
    model: &M,
    subjects: &[Subject],
    theta: &[f64],
    states: &[VariationalState],
    config: &ElboConfig,
    mode: AdMode,
    batch: Option<&[usize]>,
    iteration: u64,
    ctx: &EvalCtx,
) -> Result<ElboValueGrad> {
    config.validate()?;
    check_alignment(model, subjects, theta, states)?;
    let idx = resolve_batch(subjects.len(), batch)?;
    let it = config.draw_iteration(iteration);
    let n_theta = theta.len();
    let per = crate::par::map_indexed(&idx, |i| {
        let draws = base_draws(
            config.seed,
            rng::subject_key(&subjects[i].id),
            it,
            config.m,
            states[i].r(),
        );
        let f = SubjectElbo {
            model,
            subject: &subjects[i],
            draws: &draws,
            n_theta,
            r: states[i].r(),
            dense: states[i].dense,
            ctx,
        };
        let mut x = Vec::with_capacity(n_theta + states[i].kappa_dim());
        x.extend_from_slice(theta);
        states[i].pack_into(&mut x);
        ad::gradient(&f, &x, mode)
    })?;

    let scale = 100.0 / config.minibatch_percent;
    let mut value = 0.0;
    let mut grad_theta = vec![0.0; n_theta];
    let mut grad_kappa: Vec<Vec<f64>> =
        states.iter().map(|s| vec![0.0; s.kappa_dim()]).collect();
    for (&i, (v, g)) in idx.iter().zip(&per) {
        value += v;
        for k in 0..n_theta {
            grad_theta[k] += g[k];
        }
        for (dst, src) in grad_kappa[i].iter_mut().zip(&g[n_theta..]) {
            *dst = scale * src;
        }
    }
    value *= scale;
    for gk in grad_theta.iter_mut() {
        *gk *= scale;
    }
    if config.map_prior {
        let (v, g) = ad::gradient(&ThetaPrior(model), theta, mode)?;
        value += v;
        for (dst, src) in grad_theta.iter_mut().zip(&g) {
            *dst += src;
        }
    }
    let finite = value.is_finite()
        && grad_theta.iter().all(|v| v.is_finite())
        && grad_kappa.iter().flatten().all(|v| v.is_finite());
    if !finite {
        return Err(Error::non_finite("population ELBO gradient"));
    }
    Ok(ElboValueGrad {
        value,
        grad_theta,
        grad_kappa,
    })
}

fn check_alignment<M: Model + ?Sized>(
    model: &M,
    subjects: &[Subject],
    theta: &[f64],
    states: &[VariationalState],
) -> Result<()> {
    if theta.len() != model.n_theta() {
        return Err(Error::dimension("theta", model.n_theta(), theta.len()));
    }
    if states.len() != subjects.len() {
        return Err(Error::dimension(
            "variational states",
            subjects.len(),
            states.len(),
        ));
    }
    for (s, st) in subjects.iter().zip(states) {
        if st.r() != model.n_eta() {
            return Err(Error::dimension(
                format!("random effects for subject {}", s.id),
                model.n_eta(),
                st.r(),
            ));
        }
    }
    Ok(())
}

fn resolve_batch(n: usize, batch: Option<&[usize]>) -> Result<Vec<usize>> {
    match batch {
        None => Ok((0..n).collect()),
        Some(b) => {
            if b.is_empty() {
                return Err(Error::config("mini-batch is empty"));
            }
            if let Some(&bad) = b.iter().find(|&&i| i >= n) {
                return Err(Error::config(format!(
                    "mini-batch index {bad} out of range for {n} subjects"
                )));
            }
            Ok(b.to_vec())
        }
    }
}
