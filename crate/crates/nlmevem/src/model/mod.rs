//! Subjects, dose events, the model contract, and the built-in catalog.
//!
//! A model couples three pure functions: a prior over per-subject random
//! effects (given as moments of the transformed effects), a conditional
//! log-likelihood of one subject's observations, and a simulator. All
//! likelihood code is generic over [`Scalar`] so the same definition serves
//! plain evaluation, dual-number sensitivities, and tape recording.
//!
//! Random effects live in three coordinate systems:
//!
//! * standardized `u`: prior is exactly N(0, I); optimizers and the
//!   variational family work here,
//! * transformed `z = chol(Omega) u + m(theta)`: the Gaussian the model
//!   declares via [`Model::prior_moments`],
//! * constrained `eta = inverse_transform(z)`: what the dynamics consume
//!   (clearances, volumes, ...).
//!
//! [`transform_eta`] maps u to eta in one differentiable step.

mod linear_gaussian;
mod logistic;
mod neural_ode;
mod one_cmt_pk;
mod ppca;
mod warfarin;

pub use linear_gaussian::{exact_posterior as linear_gaussian_posterior, LinearGaussian};
pub use logistic::Logistic1d;
pub use neural_ode::{MiniNeuralOde, OBS_SD as NEURAL_ODE_OBS_SD};
pub use one_cmt_pk::{analytic_concentration, OneCmtPk};
pub use ppca::{exact_posterior as ppca_posterior, Ppca};
pub use warfarin::WarfarinPkpd;

use crate::ad::Scalar;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::RngCore;

pub const LN_2PI: f64 = crate::variational::LN_2PI;

/// A bolus dose into one model state, optionally delayed by a named
/// individual lag parameter resolved by the model at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseEvent {
    pub time: f64,
    pub amount: f64,
    pub compartment: usize,
    pub lag_name: Option<String>,
}

/// One individual's design and data. Observations are stored per response
/// variable, aligned to `observation_times`, with `None` marking gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub observation_times: Vec<f64>,
    pub observations: Vec<Vec<Option<f64>>>,
    pub dose_events: Vec<DoseEvent>,
    pub covariates: BTreeMap<String, f64>,
}

impl Subject {
    pub fn new(
        id: impl Into<String>,
        observation_times: Vec<f64>,
        observations: Vec<Vec<Option<f64>>>,
        dose_events: Vec<DoseEvent>,
        covariates: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let id = id.into();
        for (i, t) in observation_times.iter().enumerate() {
            if !t.is_finite() || *t < 0.0 {
                return Err(Error::domain(format!(
                    "subject {id}: observation time {t} is not a finite nonnegative number"
                )));
            }
            if i > 0 && observation_times[i - 1] >= *t {
                return Err(Error::domain(format!(
                    "subject {id}: observation times must be strictly increasing"
                )));
            }
        }
        for (r, series) in observations.iter().enumerate() {
            if series.len() != observation_times.len() {
                return Err(Error::dimension(
                    format!("subject {id}, response {r}"),
                    observation_times.len(),
                    series.len(),
                ));
            }
        }
        for (i, d) in dose_events.iter().enumerate() {
            if !(d.time.is_finite() && d.time >= 0.0) || !(d.amount.is_finite() && d.amount >= 0.0)
            {
                return Err(Error::domain(format!(
                    "subject {id}: dose event {i} has invalid time or amount"
                )));
            }
            if i > 0 && dose_events[i - 1].time > d.time {
                return Err(Error::domain(format!(
                    "subject {id}: dose events must be sorted by time"
                )));
            }
        }
        Ok(Subject {
            id,
            observation_times,
            observations,
            dose_events,
            covariates,
        })
    }

    /// A design carries times, doses, and covariates but no responses yet.
    pub fn design(
        id: impl Into<String>,
        observation_times: Vec<f64>,
        dose_events: Vec<DoseEvent>,
        covariates: BTreeMap<String, f64>,
    ) -> Result<Self> {
        Subject::new(id, observation_times, Vec::new(), dose_events, covariates)
    }

    /// Number of non-missing observation values across all responses.
    pub fn n_obs(&self) -> usize {
        self.observations
            .iter()
            .map(|s| s.iter().filter(|o| o.is_some()).count())
            .sum()
    }
}

/// Bound descriptor for one population parameter, with the smooth bijection
/// onto the optimizer's unconstrained axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    Free,
    Positive,
    Interval(f64, f64),
}

impl Domain {
    pub fn contains(&self, x: f64) -> bool {
        match self {
            Domain::Free => x.is_finite(),
            Domain::Positive => x.is_finite() && x > 0.0,
            Domain::Interval(a, b) => x.is_finite() && *a < x && x < *b,
        }
    }

    pub fn to_unconstrained(&self, x: f64) -> f64 {
        match self {
            Domain::Free => x,
            Domain::Positive => x.ln(),
            Domain::Interval(a, b) => {
                let p = (x - a) / (b - a);
                (p / (1.0 - p)).ln()
            }
        }
    }

    pub fn from_unconstrained(&self, u: f64) -> f64 {
        match self {
            Domain::Free => u,
            Domain::Positive => u.exp(),
            Domain::Interval(a, b) => a + (b - a) * f64::logistic(u),
        }
    }

    /// Derivative of `from_unconstrained` at u (diagonal chain-rule factor).
    pub fn dmap(&self, u: f64) -> f64 {
        match self {
            Domain::Free => 1.0,
            Domain::Positive => u.exp(),
            Domain::Interval(a, b) => {
                let s = f64::logistic(u);
                (b - a) * s * (1.0 - s)
            }
        }
    }
}

/// Per-effect map between the transformed Gaussian axis and the constrained
/// value the dynamics consume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaTransform {
    Identity,
    Log,
    Logit(f64, f64),
}

impl EtaTransform {
    /// Constrained value -> transformed (Gaussian) axis.
    pub fn forward<S: Scalar>(&self, x: S) -> S {
        match self {
            EtaTransform::Identity => x,
            EtaTransform::Log => x.ln(),
            EtaTransform::Logit(a, b) => {
                let p = (x - S::constant(*a)) / S::constant(b - a);
                p.ln() - (S::one() - p).ln()
            }
        }
    }

    /// Transformed axis -> constrained value.
    pub fn inverse<S: Scalar>(&self, z: S) -> S {
        match self {
            EtaTransform::Identity => z,
            EtaTransform::Log => z.exp(),
            EtaTransform::Logit(a, b) => S::constant(*a) + S::constant(b - a) * z.logistic(),
        }
    }

    /// log |d inverse / dz| at z.
    pub fn log_abs_det_jacobian<S: Scalar>(&self, z: S) -> S {
        match self {
            EtaTransform::Identity => S::zero(),
            EtaTransform::Log => z,
            EtaTransform::Logit(a, b) => {
                S::constant((b - a).ln()) - z.softplus() - (-z).softplus()
            }
        }
    }
}

/// Prior covariance of the transformed random effects.
#[derive(Debug, Clone)]
pub enum PriorCov<S> {
    /// Variances on the diagonal.
    Diag(Vec<S>),
    /// Packed lower triangle (row-major) of a dense covariance.
    Dense { n: usize, packed: Vec<S> },
}

impl<S: Scalar> PriorCov<S> {
    pub fn dim(&self) -> usize {
        match self {
            PriorCov::Diag(v) => v.len(),
            PriorCov::Dense { n, .. } => *n,
        }
    }

    pub fn chol(&self) -> Result<PriorChol<S>> {
        match self {
            PriorCov::Diag(v) => {
                let mut d = Vec::with_capacity(v.len());
                for (i, var) in v.iter().enumerate() {
                    if !(var.primal() > 0.0) {
                        return Err(Error::PriorCovariance {
                            context: format!("variance {i} is {}", var.primal()),
                        });
                    }
                    d.push(var.sqrt());
                }
                Ok(PriorChol::Diag(d))
            }
            PriorCov::Dense { n, packed } => match linalg::chol_packed(*n, packed) {
                Ok(l) => Ok(PriorChol::Dense { n: *n, l }),
                Err(_) => Err(Error::PriorCovariance {
                    context: "dense covariance factorization failed".to_string(),
                }),
            },
        }
    }
}

/// Lower Cholesky factor of the prior covariance.
#[derive(Debug, Clone)]
pub enum PriorChol<S> {
    Diag(Vec<S>),
    Dense { n: usize, l: Vec<S> },
}

impl<S: Scalar> PriorChol<S> {
    pub fn dim(&self) -> usize {
        match self {
            PriorChol::Diag(d) => d.len(),
            PriorChol::Dense { n, .. } => *n,
        }
    }

    pub fn matvec(&self, u: &[S]) -> Vec<S> {
        match self {
            PriorChol::Diag(d) => d.iter().zip(u).map(|(l, x)| *l * *x).collect(),
            PriorChol::Dense { n, l } => linalg::lower_matvec(*n, l, u),
        }
    }

    pub fn fwd_solve(&self, v: &[S]) -> Vec<S> {
        match self {
            PriorChol::Diag(d) => d.iter().zip(v).map(|(l, x)| *x / *l).collect(),
            PriorChol::Dense { n, l } => linalg::fwd_solve(*n, l, v),
        }
    }

    pub fn log_det(&self) -> S {
        match self {
            PriorChol::Diag(d) => {
                let mut s = S::zero();
                for l in d {
                    s = s + l.ln();
                }
                s
            }
            PriorChol::Dense { n, l } => linalg::log_det_lower(*n, l),
        }
    }
}

/// Evaluation knobs threaded through conditional log-likelihoods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalCtx {
    /// Fixed integrator steps per segment between consecutive save/event
    /// boundaries.
    pub ode_steps: usize,
}

impl Default for EvalCtx {
    fn default() -> Self {
        EvalCtx { ode_steps: 16 }
    }
}

impl EvalCtx {
    pub fn with_steps(ode_steps: usize) -> Self {
        EvalCtx { ode_steps }
    }
}

/// The model contract: a prior over random effects, a conditional
/// log-likelihood, and a simulator, all pure.
pub trait Model: Send + Sync {
    fn name(&self) -> &'static str;
    fn n_theta(&self) -> usize;
    fn n_eta(&self) -> usize;
    fn theta_names(&self) -> Vec<String>;
    fn theta_domains(&self) -> Vec<Domain>;
    fn theta_init(&self) -> Vec<f64>;
    fn eta_transforms(&self) -> Vec<EtaTransform>;
    fn response_names(&self) -> Vec<&'static str>;

    /// Name of the individual lag parameter applied to doses into the given
    /// state, if the model has one. Dataset loaders use this to attach lag
    /// names to dose events.
    fn dose_lag_name(&self, _compartment: usize) -> Option<&'static str> {
        None
    }

    /// Mean and covariance of the transformed random effects.
    fn prior_moments<S: Scalar>(&self, theta: &[S]) -> Result<(Vec<S>, PriorCov<S>)>;

    /// Log-density of one subject's observations given constrained effects.
    fn conditional_loglik<S: Scalar>(
        &self,
        subject: &Subject,
        eta: &[S],
        theta: &[S],
        ctx: &EvalCtx,
    ) -> Result<S>;

    /// High-accuracy plain-value evaluation with an adaptive integrator,
    /// used to tune the fixed step count. None for models without dynamics.
    fn conditional_loglik_reference(
        &self,
        _subject: &Subject,
        _eta: &[f64],
        _theta: &[f64],
        _rtol: f64,
        _atol: f64,
    ) -> Option<Result<f64>> {
        None
    }

    /// Prior log-density at a constrained effect vector. The default maps
    /// back to the transformed axis and evaluates the declared Gaussian with
    /// the change-of-variables correction.
    fn prior_logpdf<S: Scalar>(&self, eta: &[S], theta: &[S]) -> Result<S> {
        let (m, cov) = self.prior_moments(theta)?;
        let chol = cov.chol()?;
        let transforms = self.eta_transforms();
        if eta.len() != m.len() {
            return Err(Error::dimension("prior_logpdf effects", m.len(), eta.len()));
        }
        let mut z = Vec::with_capacity(eta.len());
        for (tr, e) in transforms.iter().zip(eta) {
            z.push(tr.forward(*e));
        }
        let mut centered = Vec::with_capacity(z.len());
        for (zi, mi) in z.iter().zip(&m) {
            centered.push(*zi - *mi);
        }
        let w = chol.fwd_solve(&centered);
        let mut quad = S::zero();
        for wi in &w {
            quad = quad + *wi * *wi;
        }
        let mut lp = -S::constant(0.5) * quad
            - S::constant(0.5 * LN_2PI * eta.len() as f64)
            - chol.log_det();
        for (tr, zi) in transforms.iter().zip(&z) {
            lp = lp - tr.log_abs_det_jacobian(*zi);
        }
        Ok(lp)
    }

    /// Log-prior over theta for MAP estimation; None means no prior.
    fn theta_prior_logpdf<S: Scalar>(&self, _theta: &[S]) -> Option<Result<S>> {
        None
    }

    /// Exact marginal log-likelihood of one subject, where tractable.
    fn closed_form_loglik(&self, _subject: &Subject, _theta: &[f64]) -> Option<Result<f64>> {
        None
    }

    /// Draw observations for a design at fixed effects and parameters.
    fn simulate(
        &self,
        design: &Subject,
        eta: &[f64],
        theta: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<Option<f64>>>>;
}

/// Map standardized effects u to constrained effects:
/// `inverse_transform(chol(Omega(theta)) u + m(theta))`.
pub fn transform_eta<S: Scalar, M: Model + ?Sized>(
    model: &M,
    u: &[S],
    theta: &[S],
) -> Result<Vec<S>> {
    let (m, cov) = model.prior_moments(theta)?;
    if u.len() != m.len() {
        return Err(Error::dimension("transform_eta effects", m.len(), u.len()));
    }
    let chol = cov.chol()?;
    let mut z = chol.matvec(u);
    for (zi, mi) in z.iter_mut().zip(&m) {
        *zi = *zi + *mi;
    }
    let transforms = model.eta_transforms();
    Ok(z.iter()
        .zip(&transforms)
        .map(|(zi, tr)| tr.inverse(*zi))
        .collect())
}

/// Validate that a subject carries exactly the model's response count.
pub(crate) fn expect_responses(subject: &Subject, n: usize, model: &str) -> Result<()> {
    if subject.observations.len() != n {
        return Err(Error::dimension(
            format!("{model} subject {} responses", subject.id),
            n,
            subject.observations.len(),
        ));
    }
    Ok(())
}

/// Log-density of a univariate normal at a known observation.
pub fn normal_logpdf<S: Scalar>(y: f64, mean: S, sd: S) -> S {
    let z = (S::constant(y) - mean) / sd;
    -S::constant(0.5) * z * z - sd.ln() - S::constant(0.5 * LN_2PI)
}

/// Draw a population: standardized effects from N(0, I) become constrained
/// effects via [`transform_eta`], then each model simulates observations.
/// Deterministic given (seed, subject index); returns the constrained
/// effects alongside the subjects.
pub fn simulate_population<M: Model>(
    model: &M,
    n_subjects: usize,
    design: &Subject,
    theta: &[f64],
    seed: u64,
) -> Result<(Vec<Subject>, Vec<Vec<f64>>)> {
    if theta.len() != model.n_theta() {
        return Err(Error::dimension(
            "simulate_population theta",
            model.n_theta(),
            theta.len(),
        ));
    }
    let r = model.n_eta();
    let mut subjects = Vec::with_capacity(n_subjects);
    let mut etas = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let mut eta_rng = rng::stream(seed, &[rng::tag::SIM_ETA, i as u64]);
        let u = rng::standard_normal_vec(&mut eta_rng, r);
        let eta = transform_eta(model, &u, theta)?;
        let mut obs_rng = rng::stream(seed, &[rng::tag::SIM_OBS, i as u64]);
        let observations = model.simulate(design, &eta, theta, &mut obs_rng)?;
        subjects.push(Subject::new(
            (i + 1).to_string(),
            design.observation_times.clone(),
            observations,
            design.dose_events.clone(),
            design.covariates.clone(),
        )?);
        etas.push(eta);
    }
    Ok((subjects, etas))
}

/// The built-in model catalog, dispatching the non-object-safe [`Model`]
/// trait over a closed set of implementations.
#[derive(Debug, Clone)]
pub enum Builtin {
    LinearGaussian(LinearGaussian),
    Ppca(Ppca),
    Logistic1d(Logistic1d),
    OneCmtPk(OneCmtPk),
    WarfarinPkpd(WarfarinPkpd),
    MiniNeuralOde(MiniNeuralOde),
}

pub const CATALOG: &[&str] = &[
    "linear_gaussian",
    "ppca",
    "logistic_1d",
    "one_cmt_pk",
    "warfarin_pkpd",
    "mini_neural_ode",
];

/// Look a model up by its catalog name.
pub fn by_name(name: &str) -> Result<Builtin> {
    match name {
        "linear_gaussian" => Ok(Builtin::LinearGaussian(LinearGaussian)),
        "ppca" => Ok(Builtin::Ppca(Ppca)),
        "logistic_1d" => Ok(Builtin::Logistic1d(Logistic1d)),
        "one_cmt_pk" => Ok(Builtin::OneCmtPk(OneCmtPk)),
        "warfarin_pkpd" => Ok(Builtin::WarfarinPkpd(WarfarinPkpd)),
        "mini_neural_ode" => Ok(Builtin::MiniNeuralOde(MiniNeuralOde::new(80))),
        _ => Err(Error::UnknownModel {
            name: name.to_string(),
            available: CATALOG.join(", "),
        }),
    }
}

macro_rules! each_builtin {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            Builtin::LinearGaussian($m) => $body,
            Builtin::Ppca($m) => $body,
            Builtin::Logistic1d($m) => $body,
            Builtin::OneCmtPk($m) => $body,
            Builtin::WarfarinPkpd($m) => $body,
            Builtin::MiniNeuralOde($m) => $body,
        }
    };
}

impl Model for Builtin {
    fn name(&self) -> &'static str {
        each_builtin!(self, m => m.name())
    }
    fn n_theta(&self) -> usize {
        each_builtin!(self, m => m.n_theta())
    }
    fn n_eta(&self) -> usize {
        each_builtin!(self, m => m.n_eta())
    }
    fn theta_names(&self) -> Vec<String> {
        each_builtin!(self, m => m.theta_names())
    }
    fn theta_domains(&self) -> Vec<Domain> {
        each_builtin!(self, m => m.theta_domains())
    }
    fn theta_init(&self) -> Vec<f64> {
        each_builtin!(self, m => m.theta_init())
    }
    fn eta_transforms(&self) -> Vec<EtaTransform> {
        each_builtin!(self, m => m.eta_transforms())
    }
    fn response_names(&self) -> Vec<&'static str> {
        each_builtin!(self, m => m.response_names())
    }
    fn dose_lag_name(&self, compartment: usize) -> Option<&'static str> {
        each_builtin!(self, m => m.dose_lag_name(compartment))
    }
    fn prior_moments<S: Scalar>(&self, theta: &[S]) -> Result<(Vec<S>, PriorCov<S>)> {
        each_builtin!(self, m => m.prior_moments(theta))
    }
    fn conditional_loglik<S: Scalar>(
        &self,
        subject: &Subject,
        eta: &[S],
        theta: &[S],
        ctx: &EvalCtx,
    ) -> Result<S> {
        each_builtin!(self, m => m.conditional_loglik(subject, eta, theta, ctx))
    }
    fn conditional_loglik_reference(
        &self,
        subject: &Subject,
        eta: &[f64],
        theta: &[f64],
        rtol: f64,
        atol: f64,
    ) -> Option<Result<f64>> {
        each_builtin!(self, m => m.conditional_loglik_reference(subject, eta, theta, rtol, atol))
    }
    fn prior_logpdf<S: Scalar>(&self, eta: &[S], theta: &[S]) -> Result<S> {
        each_builtin!(self, m => m.prior_logpdf(eta, theta))
    }
    fn theta_prior_logpdf<S: Scalar>(&self, theta: &[S]) -> Option<Result<S>> {
        each_builtin!(self, m => m.theta_prior_logpdf(theta))
    }
    fn closed_form_loglik(&self, subject: &Subject, theta: &[f64]) -> Option<Result<f64>> {
        each_builtin!(self, m => m.closed_form_loglik(subject, theta))
    }
    fn simulate(
        &self,
        design: &Subject,
        eta: &[f64],
        theta: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<Option<f64>>>> {
        each_builtin!(self, m => m.simulate(design, eta, theta, rng))
    }
}
