//! The population fit driver: joint maximization of the summed per-subject
//! ELBOs over the concatenated vector `(theta_unconstrained, kappa_1, ...,
//! kappa_N)`, in one of three variants, followed by finishing log-likelihood
//! evaluations and optional empirical Bayes estimates.

use crate::ad::AdMode;
use crate::elbo::{elbo_gradient, ElboConfig, ElboMode};
use crate::error::{Error, Result};
use crate::marginal::{
    maximize_log_joint, report_elbo, report_is, report_laplace, LogJoint, LoglikReport,
};
use crate::model::{transform_eta, Domain, EvalCtx, Model, Subject};
use crate::optim::{
    maximize_adam, maximize_lbfgs, AdamConfig, IterationTrace, LbfgsConfig, OptimResult,
    Termination,
};
use crate::rng::{self, tag};
use crate::variational::{scale_len, VariationalState};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

/// Which VEM flavor drives the optimization. The optimizer is implied:
/// the deterministic variant runs L-BFGS on its fixed-draw objective, the
/// stochastic variants run Adam on resampled estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Draws fixed once per subject; the objective is an ordinary smooth
    /// function and is maximized with L-BFGS.
    Deterministic,
    /// Fresh draws every iteration; Adam.
    Stochastic,
    /// Fresh draws plus subject subsampling every iteration; Adam.
    StochasticMinibatch,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Deterministic => "deterministic",
            Variant::Stochastic => "stochastic",
            Variant::StochasticMinibatch => "stochastic_minibatch",
        }
    }
}

/// Gradient-mode request. `Auto` resolves from the optimization dimension:
/// reverse once `n_theta + sum_i dim(kappa_i)` exceeds [`AUTO_REVERSE_DIM`],
/// forward below it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdChoice {
    Auto,
    Forward,
    Reverse,
}

pub const AUTO_REVERSE_DIM: usize = 512;

/// Everything a fit needs beyond the model and the data.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub variant: Variant,
    /// Draw count, MAP switch, mini-batch percentage. The `mode` and `seed`
    /// fields are overridden from `variant` and [`FitConfig::seed`] so one
    /// master seed governs the whole fit.
    pub elbo: ElboConfig,
    pub lbfgs: LbfgsConfig,
    pub adam: AdamConfig,
    /// Model-space starting point; `None` uses the model's catalog values.
    pub theta_init: Option<Vec<f64>>,
    /// Starting variational states; `None` starts every subject at the
    /// standardized prior (zero mean, unit scales).
    pub kappa_init: Option<Vec<VariationalState>>,
    /// Dense lower-triangular variational scale instead of diagonal.
    pub dense: bool,
    pub seed: u64,
    pub ad_mode: AdChoice,
    /// Integrator steps per segment. `None` selects the smallest ladder
    /// entry whose fixed-step log-likelihood matches the adaptive reference
    /// at the starting point, then freezes it for the whole fit; models
    /// without dynamics keep the default.
    pub ode_steps: Option<usize>,
    /// Importance samples per subject in the finishing evaluation.
    pub is_samples: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            variant: Variant::Deterministic,
            elbo: ElboConfig::default(),
            lbfgs: LbfgsConfig::default(),
            adam: AdamConfig::default(),
            theta_init: None,
            kappa_init: None,
            dense: false,
            seed: 0,
            ad_mode: AdChoice::Auto,
            ode_steps: None,
            is_samples: 10_000,
        }
    }
}

/// Finishing log-likelihood evaluations at the fitted point.
#[derive(Debug, Clone)]
pub struct FitLoglik {
    /// Deterministic ELBO report with the fit's own draw addresses.
    pub elbo: LoglikReport,
    /// Importance sampling from the fitted variational states.
    pub importance: LoglikReport,
    /// Laplace approximation started at the variational means.
    pub laplace: LoglikReport,
}

/// Reproducibility-relevant settings and counters for a completed fit.
/// Everything here except `wall_time_s` is a pure function of the inputs.
#[derive(Debug, Clone)]
pub struct FitMeta {
    pub variant: Variant,
    pub seed: u64,
    pub dense: bool,
    pub draws_per_subject: usize,
    pub map_prior: bool,
    pub minibatch_percent: f64,
    pub minibatch_scheme: &'static str,
    /// Frozen integrator steps per segment used everywhere in this fit.
    pub ode_steps: usize,
    /// Whether `ode_steps` came from the reference-matching pass.
    pub ode_steps_tuned: bool,
    /// Resolved gradient mode actually used.
    pub ad_mode: AdMode,
    pub lbfgs: LbfgsConfig,
    pub adam: AdamConfig,
    pub is_samples: usize,
    /// Objective/gradient callback invocations during optimization.
    pub objective_evals: usize,
    /// Adam iterations skipped on non-finite estimates.
    pub skipped_steps: usize,
    pub wall_time_s: f64,
}

/// A completed fit: estimates, diagnostics, and enough metadata to replay
/// the run bit for bit from the same dataset.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Population estimate, model space.
    pub theta: Vec<f64>,
    pub theta_names: Vec<String>,
    pub states: Vec<VariationalState>,
    pub trace: Vec<IterationTrace>,
    pub termination: Termination,
    pub loglik: FitLoglik,
    pub meta: FitMeta,
}

/// Flat-vector layout of one optimization point.
struct Packing {
    domains: Vec<Domain>,
    n_theta: usize,
    r: usize,
    dense: bool,
}

impl Packing {
    fn kappa_dim(&self) -> usize {
        self.r + scale_len(self.r, self.dense)
    }

    fn pack(&self, theta: &[f64], states: &[VariationalState]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.n_theta + states.len() * self.kappa_dim());
        for (d, t) in self.domains.iter().zip(theta) {
            x.push(d.to_unconstrained(*t));
        }
        for s in states {
            s.pack_into(&mut x);
        }
        x
    }

    fn unpack(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<VariationalState>)> {
        let mut theta = Vec::with_capacity(self.n_theta);
        for (d, u) in self.domains.iter().zip(&x[..self.n_theta]) {
            theta.push(d.from_unconstrained(*u));
        }
        let k = self.kappa_dim();
        let mut states = Vec::with_capacity((x.len() - self.n_theta) / k);
        for chunk in x[self.n_theta..].chunks(k) {
            states.push(VariationalState::unpack(chunk, self.r, self.dense)?);
        }
        Ok((theta, states))
    }

    /// Pull the model-space gradient back through the domain maps and
    /// append the (already unconstrained) kappa blocks.
    fn chain_gradient(
        &self,
        x: &[f64],
        grad_theta: &[f64],
        grad_kappa: &[Vec<f64>],
    ) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        for i in 0..self.n_theta {
            g.push(grad_theta[i] * self.domains[i].dmap(x[i]));
        }
        for gk in grad_kappa {
            g.extend_from_slice(gk);
        }
        g
    }
}

/// Without-replacement mini-batch schedule: each epoch draws a fresh
/// permutation of the subjects (keyed by the epoch index, so replay is
/// exact) and walks it in fixed-size batches; an incomplete tail batch is
/// dropped and those subjects reappear in the next epoch's permutation.
struct BatchSchedule {
    n: usize,
    batch_size: usize,
    per_epoch: u64,
    seed: u64,
}

impl BatchSchedule {
    fn new(n: usize, percent: f64, seed: u64) -> Self {
        let batch_size = ((n as f64 * percent / 100.0).round() as usize).clamp(1, n);
        BatchSchedule {
            n,
            batch_size,
            per_epoch: (n / batch_size) as u64,
            seed,
        }
    }

    /// Subjects evaluated at 1-based optimizer iteration `t`.
    fn batch(&self, t: u64) -> Vec<usize> {
        let epoch = (t - 1) / self.per_epoch;
        let slot = ((t - 1) % self.per_epoch) as usize;
        let mut idx: Vec<usize> = (0..self.n).collect();
        let mut stream = rng::stream(self.seed, &[tag::MINIBATCH, epoch]);
        for i in (1..self.n).rev() {
            let j = stream.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx[slot * self.batch_size..(slot + 1) * self.batch_size].to_vec()
    }
}

/// Step ladder searched by the integrator tuning pass.
const STEP_LADDER: [usize; 8] = [4, 8, 16, 32, 64, 128, 256, 512];
/// Required agreement between fixed-step and reference log-likelihoods.
const STEP_MATCH_RTOL: f64 = 1e-6;

/// Pick the smallest ladder entry whose fixed-step conditional
/// log-likelihood matches the adaptive reference at the starting point
/// (prior-center effects) for every subject. `None` when the model has no
/// dynamics; the ladder top when nothing matches.
fn tune_ode_steps<M: Model + ?Sized>(
    model: &M,
    subjects: &[Subject],
    theta: &[f64],
) -> Result<Option<usize>> {
    let u0 = vec![0.0; model.n_eta()];
    let eta = transform_eta(model, &u0, theta)?;
    let mut refs = Vec::with_capacity(subjects.len());
    for s in subjects {
        match model.conditional_loglik_reference(s, &eta, theta, 1e-9, 1e-12) {
            None => return Ok(None),
            Some(v) => refs.push(v?),
        }
    }
    for &steps in &STEP_LADDER {
        let ctx = EvalCtx::with_steps(steps);
        let mut all_match = true;
        for (s, want) in subjects.iter().zip(&refs) {
            let got = model.conditional_loglik::<f64>(s, &eta, theta, &ctx)?;
            if (got - want).abs() > STEP_MATCH_RTOL * want.abs().max(1.0) {
                all_match = false;
                break;
            }
        }
        if all_match {
            return Ok(Some(steps));
        }
    }
    Ok(Some(STEP_LADDER[STEP_LADDER.len() - 1]))
}

/// Fit the model by joint maximization of the population ELBO.
pub fn fit<M: Model + ?Sized>(
    model: &M,
    subjects: &[Subject],
    config: &FitConfig,
) -> Result<FitResult> {
    #[cfg(feature = "std")]
    let started = std::time::Instant::now();

    if subjects.is_empty() {
        return Err(Error::config("fit needs at least one subject"));
    }
    config.elbo.validate()?;
    if config.is_samples < 1 {
        return Err(Error::config("is_samples must be >= 1"));
    }
    if config.variant != Variant::StochasticMinibatch && config.elbo.minibatch_percent != 100.0 {
        return Err(Error::config(
            "subject subsampling requires the stochastic_minibatch variant",
        ));
    }

    let n_theta = model.n_theta();
    let domains = model.theta_domains();
    let theta_names = model.theta_names();
    let theta0 = match &config.theta_init {
        Some(t) => t.clone(),
        None => model.theta_init(),
    };
    if theta0.len() != n_theta {
        return Err(Error::dimension("theta_init", n_theta, theta0.len()));
    }
    for ((d, t), name) in domains.iter().zip(&theta0).zip(&theta_names) {
        if !d.contains(*t) {
            return Err(Error::config(format!(
                "starting value {t} for {name} lies outside its domain"
            )));
        }
    }
    let r = model.n_eta();
    let states0: Vec<VariationalState> = match &config.kappa_init {
        Some(states) => {
            if states.len() != subjects.len() {
                return Err(Error::dimension(
                    "kappa_init states",
                    subjects.len(),
                    states.len(),
                ));
            }
            for s in states {
                if s.r() != r {
                    return Err(Error::dimension("kappa_init effects", r, s.r()));
                }
                if s.dense != config.dense {
                    return Err(Error::config(
                        "kappa_init family does not match the dense flag",
                    ));
                }
            }
            states.clone()
        }
        None => (0..subjects.len())
            .map(|_| VariationalState::init(r, config.dense))
            .collect(),
    };

    let (ode_steps, ode_steps_tuned) = match config.ode_steps {
        Some(0) => return Err(Error::config("ode_steps must be >= 1")),
        Some(s) => (s, false),
        None => match tune_ode_steps(model, subjects, &theta0)? {
            Some(s) => (s, true),
            None => (EvalCtx::default().ode_steps, false),
        },
    };
    let ctx = EvalCtx::with_steps(ode_steps);

    let mut econf = config.elbo.clone();
    econf.seed = config.seed;
    econf.mode = match config.variant {
        Variant::Deterministic => ElboMode::DeterministicPresampled,
        Variant::Stochastic | Variant::StochasticMinibatch => ElboMode::StochasticResample,
    };

    let packing = Packing {
        domains,
        n_theta,
        r,
        dense: config.dense,
    };
    let x0 = packing.pack(&theta0, &states0);
    let ad_mode = match config.ad_mode {
        AdChoice::Forward => AdMode::Forward,
        AdChoice::Reverse => AdMode::Reverse,
        AdChoice::Auto => {
            if x0.len() > AUTO_REVERSE_DIM {
                AdMode::Reverse
            } else {
                AdMode::Forward
            }
        }
    };

    let value_grad = |x: &[f64], batch: Option<&[usize]>, t: u64| -> Result<(f64, Vec<f64>)> {
        let (theta, states) = packing.unpack(x)?;
        let vg = elbo_gradient(model, subjects, &theta, &states, &econf, ad_mode, batch, t, &ctx)?;
        let g = packing.chain_gradient(x, &vg.grad_theta, &vg.grad_kappa);
        Ok((vg.value, g))
    };

    let opt: OptimResult = match config.variant {
        Variant::Deterministic => {
            maximize_lbfgs(|x| value_grad(x, None, 0), &x0, &config.lbfgs)?
        }
        Variant::Stochastic => {
            maximize_adam(|x, t| value_grad(x, None, t), &x0, &config.adam)?
        }
        Variant::StochasticMinibatch => {
            let schedule = BatchSchedule::new(subjects.len(), econf.minibatch_percent, config.seed);
            maximize_adam(
                |x, t| {
                    let batch = schedule.batch(t);
                    value_grad(x, Some(&batch), t)
                },
                &x0,
                &config.adam,
            )?
        }
    };

    let (theta_hat, states_hat) = packing.unpack(&opt.x)?;

    // Finishing evaluations at the optimum: the deterministic ELBO over the
    // fit's own draw addresses, importance sampling from the fitted states,
    // and a Laplace pass started at the variational means.
    let mut finish = econf.clone();
    finish.mode = ElboMode::DeterministicPresampled;
    finish.minibatch_percent = 100.0;
    let elbo_report = report_elbo(model, subjects, &theta_hat, &states_hat, &finish, &ctx)?;
    let is_report = report_is(
        model,
        subjects,
        &theta_hat,
        &states_hat,
        config.is_samples,
        config.seed,
        &ctx,
    )?;
    let laplace_inits: Vec<Vec<f64>> = states_hat.iter().map(|s| s.mu.clone()).collect();
    let laplace_report =
        report_laplace(model, subjects, &theta_hat, Some(&laplace_inits), &ctx)?;

    #[cfg(feature = "std")]
    let wall_time_s = started.elapsed().as_secs_f64();
    #[cfg(not(feature = "std"))]
    let wall_time_s = 0.0;

    Ok(FitResult {
        theta: theta_hat,
        theta_names,
        states: states_hat,
        trace: opt.trace,
        termination: opt.termination,
        loglik: FitLoglik {
            elbo: elbo_report,
            importance: is_report,
            laplace: laplace_report,
        },
        meta: FitMeta {
            variant: config.variant,
            seed: config.seed,
            dense: config.dense,
            draws_per_subject: econf.m,
            map_prior: econf.map_prior,
            minibatch_percent: econf.minibatch_percent,
            minibatch_scheme: "without replacement per epoch",
            ode_steps,
            ode_steps_tuned,
            ad_mode,
            lbfgs: config.lbfgs.clone(),
            adam: config.adam.clone(),
            is_samples: config.is_samples,
            objective_evals: opt.evals,
            skipped_steps: opt.skipped_steps,
            wall_time_s,
        },
    })
}

/// Build the deterministic finishing configuration from a completed fit:
/// same seed, draw count, family, and integrator steps, started at the
/// source's estimates.
pub fn warm_start(source: &FitResult) -> Result<FitConfig> {
    if source.trace.is_empty() {
        return Err(Error::config(
            "warm start needs a source fit with at least one accepted iteration",
        ));
    }
    Ok(FitConfig {
        variant: Variant::Deterministic,
        elbo: ElboConfig {
            m: source.meta.draws_per_subject,
            mode: ElboMode::DeterministicPresampled,
            minibatch_percent: 100.0,
            map_prior: source.meta.map_prior,
            seed: source.meta.seed,
        },
        lbfgs: source.meta.lbfgs.clone(),
        adam: source.meta.adam.clone(),
        theta_init: Some(source.theta.clone()),
        kappa_init: Some(source.states.clone()),
        dense: source.meta.dense,
        seed: source.meta.seed,
        ad_mode: match source.meta.ad_mode {
            AdMode::Forward => AdChoice::Forward,
            AdMode::Reverse => AdChoice::Reverse,
        },
        ode_steps: Some(source.meta.ode_steps),
        is_samples: source.meta.is_samples,
    })
}

/// One subject's empirical Bayes estimate: the maximizer of the joint
/// log-density over its random effects at fixed theta.
#[derive(Debug, Clone)]
pub struct EbeSubject {
    /// Constrained-space maximizer (the scale the dynamics consume).
    pub eta: Vec<f64>,
    /// Standardized-space maximizer.
    pub mode_u: Vec<f64>,
    pub iterations: usize,
    /// False when the inner Newton hit its iteration cap; `eta` is then the
    /// best point found.
    pub converged: bool,
}

/// Empirical Bayes estimates for every subject, by Newton ascent on the
/// standardized log joint started at each variational mean.
pub fn compute_ebes<M: Model + ?Sized>(
    model: &M,
    subjects: &[Subject],
    theta: &[f64],
    states: &[VariationalState],
    ctx: &EvalCtx,
) -> Result<Vec<EbeSubject>> {
    if states.len() != subjects.len() {
        return Err(Error::dimension(
            "variational states",
            subjects.len(),
            states.len(),
        ));
    }
    let r = model.n_eta();
    for s in states {
        if s.r() != r {
            return Err(Error::dimension("state effects", r, s.r()));
        }
    }
    let idx: Vec<usize> = (0..subjects.len()).collect();
    crate::par::map_indexed(&idx, |i| {
        let joint = LogJoint {
            model,
            subject: &subjects[i],
            theta,
            ctx,
        };
        let mode = maximize_log_joint(&joint, &states[i].mu, &subjects[i].id)?;
        let eta = transform_eta(model, &mode.u, theta)?;
        Ok(EbeSubject {
            eta,
            mode_u: mode.u,
            iterations: mode.iterations,
            converged: mode.converged,
        })
    })
}
