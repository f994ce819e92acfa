//! Post-fit and oracle marginal log-likelihood machinery: importance
//! sampling, the Laplace approximation, Gauss-Hermite quadrature, and the
//! closed-form conjugate oracles.
//!
//! All integration happens over standardized random effects u ~ N(0, I),
//! where the marginal is exactly `int p(y | transform_eta(u)) phi(u) du`, so
//! no transform Jacobians appear anywhere. Everything accumulates in log
//! space; raw joint densities over hundreds of observations underflow long
//! before their logs misbehave.

use crate::ad::{self, DiffFn, Scalar};
use crate::elbo::{elbo_subject, ElboConfig};
use crate::error::{Error, Result};
use crate::linalg::{bwd_solve_t, chol_packed, chol_solve, log_det_lower, lt, packed_len};
use crate::model::{transform_eta, EvalCtx, Model, Subject};
use crate::rng;
use crate::variational::{base_draws, std_normal_logpdf, VariationalState, LN_2PI};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Marginal log-likelihood of a population by one method, with the
/// method-specific diagnostics that make the number auditable.
#[derive(Debug, Clone)]
pub struct LoglikReport {
    /// One of "elbo", "is", "laplace", "gh", "closed_form".
    pub method: &'static str,
    pub per_subject: Vec<f64>,
    /// Fixed-order sum of `per_subject`.
    pub total: f64,
    /// Per-subject Monte Carlo standard errors (importance sampling only).
    pub per_subject_mc_se: Vec<f64>,
    /// Total-level standard error, sqrt of the summed variances.
    pub mc_se: Option<f64>,
    /// Importance samples per subject.
    pub samples: Option<usize>,
    /// Quadrature nodes per axis.
    pub nodes: Option<usize>,
    /// Laplace inner-optimizer iterations per subject.
    pub inner_iterations: Vec<usize>,
    /// Laplace inner-optimizer convergence flags per subject.
    pub inner_converged: Vec<bool>,
}

impl LoglikReport {
    fn new(method: &'static str, per_subject: Vec<f64>) -> Self {
        let total = per_subject.iter().sum();
        LoglikReport {
            method,
            per_subject,
            total,
            per_subject_mc_se: Vec::new(),
            mc_se: None,
            samples: None,
            nodes: None,
            inner_iterations: Vec::new(),
            inner_converged: Vec::new(),
        }
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let mx = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !mx.is_finite() {
        return mx; // all -inf (or a NaN/inf already poisoned the set)
    }
    let s: f64 = xs.iter().map(|&x| (x - mx).exp()).sum();
    mx + s.ln()
}

/// Log joint log p(y, u | theta) in standardized coordinates, as a
/// differentiable function of u with theta held constant.
pub(crate) struct LogJoint<'a, M: Model + ?Sized> {
    pub(crate) model: &'a M,
    pub(crate) subject: &'a Subject,
    pub(crate) theta: &'a [f64],
    pub(crate) ctx: &'a EvalCtx,
}

impl<M: Model + ?Sized> DiffFn for LogJoint<'_, M> {
    fn eval<S: Scalar>(&self, u: &[S]) -> Result<S> {
        let theta: Vec<S> = self.theta.iter().map(|&v| S::constant(v)).collect();
        let eta = transform_eta(self.model, u, &theta)?;
        let cond = self
            .model
            .conditional_loglik(self.subject, &eta, &theta, self.ctx)?;
        Ok(cond + std_normal_logpdf(u))
    }
}

/// Importance-sampling estimate of one subject's marginal log-likelihood,
/// with its delta-method standard error.
///
/// Draws are raw iid samples from the proposal (never moment-matched; that
/// would bias the weights), addressed by `(seed, IS, subject key)`. Point
/// failures while evaluating a draw (solver blowup in a far tail) count as
/// zero-weight samples; if every draw fails the proposal is degenerate.
pub fn loglik_is<M: Model + ?Sized>(
    model: &M,
    subject: &Subject,
    theta: &[f64],
    proposal: &VariationalState,
    m: usize,
    seed: u64,
    ctx: &EvalCtx,
) -> Result<(f64, f64)> {
    if m < 1 {
        return Err(Error::config("importance sampling needs at least one draw"));
    }
    let r = proposal.r();
    if r != model.n_eta() {
        return Err(Error::dimension("proposal dimension", model.n_eta(), r));
    }
    let q = proposal.q();
    let joint = LogJoint {
        model,
        subject,
        theta,
        ctx,
    };
    let mut stream = rng::stream(seed, &[rng::tag::IS, rng::subject_key(&subject.id)]);
    let mut log_w = Vec::with_capacity(m);
    for _ in 0..m {
        let xi = rng::standard_normal_vec(&mut stream, r);
        let u = q.sample(&xi);
        let lw = match joint.eval::<f64>(&u) {
            Ok(lj) => {
                let lw = lj - q.logpdf(&u);
                if lw.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    lw
                }
            }
            Err(e) if e.is_point_dependent() => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        log_w.push(lw);
    }
    let mx = log_w.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if mx == f64::NEG_INFINITY {
        return Err(Error::DegenerateProposal { m });
    }
    let a: Vec<f64> = log_w.iter().map(|&l| (l - mx).exp()).collect();
    let mean = a.iter().sum::<f64>() / m as f64;
    let value = mx + mean.ln();
    // Delta method on log(p_hat): se(log p_hat) ~= sd(w) / (sqrt(M) * mean(w)).
    let mc_se = if m == 1 {
        f64::INFINITY
    } else {
        let var = a.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (m as f64 - 1.0);
        var.sqrt() / ((m as f64).sqrt() * mean)
    };
    Ok((value, mc_se))
}

/// Result of one subject's Laplace approximation.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub value: f64,
    /// Maximizer of the log joint, standardized coordinates.
    pub mode: Vec<f64>,
    /// Negated Hessian of the log joint at the mode, row-major r x r.
    pub neg_hessian: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The determinant needed a Levenberg diagonal boost (near-singular
    /// curvature at the mode; the returned value is then approximate).
    pub boosted: bool,
}

const LAPLACE_MAX_ITERS: usize = 100;
const LAPLACE_GRAD_TOL: f64 = 1e-9;

/// Laplace approximation of one subject's marginal log-likelihood:
/// log p(y, u*) + (r/2) log 2 pi - (1/2) log |-H| at the inner mode u*,
/// found by Newton ascent with an Armijo line search from `init_eta`
/// (standardized coordinates).
pub fn loglik_laplace<M: Model + ?Sized>(
    model: &M,
    subject: &Subject,
    theta: &[f64],
    init_eta: &[f64],
    ctx: &EvalCtx,
) -> Result<LaplaceFit> {
    let r = model.n_eta();
    if init_eta.len() != r {
        return Err(Error::dimension("Laplace start point", r, init_eta.len()));
    }
    let joint = LogJoint {
        model,
        subject,
        theta,
        ctx,
    };
    let mode = maximize_log_joint(&joint, init_eta, &subject.id)?;
    let (l, boosted) = boosted_chol(r, &mode.hess, 5).map_err(|_| Error::IndefiniteHessian {
        subject: subject.id.clone(),
    })?;
    let log_det_neg_h = 2.0 * log_det_lower(r, &l);
    let mut neg_hessian = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..r {
            neg_hessian[i * r + j] = -hess_entry(&mode.hess, i, j);
        }
    }
    Ok(LaplaceFit {
        value: mode.value + 0.5 * r as f64 * LN_2PI - 0.5 * log_det_neg_h,
        mode: mode.u,
        neg_hessian,
        iterations: mode.iterations,
        converged: mode.converged,
        boosted,
    })
}

/// Inner maximizer state shared by the Laplace and quadrature marginals.
pub(crate) struct InnerMode {
    pub(crate) u: Vec<f64>,
    pub(crate) value: f64,
    /// Log-joint Hessian at `u`, packed lower triangle.
    pub(crate) hess: Vec<f64>,
    pub(crate) iterations: usize,
    pub(crate) converged: bool,
}

/// Newton ascent with Armijo backtracking on the standardized log joint.
pub(crate) fn maximize_log_joint<M: Model + ?Sized>(
    joint: &LogJoint<'_, M>,
    init: &[f64],
    subject_id: &str,
) -> Result<InnerMode> {
    let r = init.len();
    let mut u = init.to_vec();
    let (mut value, mut grad) = ad::gradient(joint, &u, ad::AdMode::Forward)?;
    if !value.is_finite() {
        return Err(Error::non_finite(format!(
            "log joint at the inner-mode start point, subject {subject_id}"
        )));
    }
    let mut iterations = 0;
    let mut converged = inf_norm(&grad) <= LAPLACE_GRAD_TOL;
    let mut hess = hessian_packed(joint, &u)?;
    while !converged && iterations < LAPLACE_MAX_ITERS {
        iterations += 1;
        // Ascent direction d = (-H)^-1 g, boosting the diagonal when -H is
        // not positive definite; steepest ascent as the last resort.
        let dir = match boosted_chol(r, &hess, 5) {
            Ok((l, _)) => chol_solve(r, &l, &grad),
            Err(_) => grad.clone(),
        };
        let slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        let (dir, slope) = if slope > 0.0 {
            (dir, slope)
        } else {
            let s: f64 = grad.iter().map(|g| g * g).sum();
            (grad.clone(), s)
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let ut: Vec<f64> = u.iter().zip(&dir).map(|(ui, di)| ui + t * di).collect();
            match ad::gradient(joint, &ut, ad::AdMode::Forward) {
                Ok((vt, gt)) if vt.is_finite() && vt >= value + 1e-4 * t * slope => {
                    accepted = Some((ut, vt, gt));
                    break;
                }
                Ok(_) => {}
                Err(e) if e.is_point_dependent() => {}
                Err(e) => return Err(e),
            }
            t *= 0.5;
        }
        let Some((ut, vt, gt)) = accepted else {
            break; // stuck: report the best point found, unconverged
        };
        u = ut;
        value = vt;
        grad = gt;
        hess = hessian_packed(&joint, &u)?;
        converged = inf_norm(&grad) <= LAPLACE_GRAD_TOL;
    }
    Ok(InnerMode {
        u,
        value,
        hess,
        iterations,
        converged,
    })
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &x| a.max(x.abs()))
}

/// Hessian of the log joint, packed lower triangle.
fn hessian_packed<M: Model + ?Sized>(joint: &LogJoint<'_, M>, u: &[f64]) -> Result<Vec<f64>> {
    let h = ad::hessian(joint, u)?;
    let r = u.len();
    let mut packed = vec![0.0; packed_len(r)];
    for i in 0..r {
        for j in 0..=i {
            packed[lt(i, j)] = h[i][j];
        }
    }
    Ok(packed)
}

fn hess_entry(packed: &[f64], i: usize, j: usize) -> f64 {
    if j <= i {
        packed[lt(i, j)]
    } else {
        packed[lt(j, i)]
    }
}

/// Cholesky of -H with up to `max_boosts` escalating diagonal additions.
/// Returns the factor and whether any boost was applied.
fn boosted_chol(r: usize, hess: &[f64], max_boosts: usize) -> Result<(Vec<f64>, bool)> {
    let neg: Vec<f64> = hess.iter().map(|v| -v).collect();
    if let Ok(l) = chol_packed(r, &neg) {
        return Ok((l, false));
    }
    let diag_scale = (0..r)
        .map(|i| neg[lt(i, i)].abs())
        .fold(1.0_f64, |a, b| a.max(b));
    let mut lambda = 1e-8 * diag_scale;
    for _ in 0..max_boosts {
        let mut boosted = neg.clone();
        for i in 0..r {
            boosted[lt(i, i)] += lambda;
        }
        if let Ok(l) = chol_packed(r, &boosted) {
            return Ok((l, true));
        }
        lambda *= 100.0;
    }
    Err(Error::domain("curvature not positive definite"))
}

/// Gauss-Hermite nodes and weights for `int exp(-x^2) f(x) dx`, computed
/// from the orthonormal Hermite recurrence: Newton iteration on the nodes
/// with Christoffel weights 1 / sum_k p_k(x)^2.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::config("quadrature needs at least one node"));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    // Largest roots first, then march inward; symmetric pairs mirrored.
    let mut x = 0.0_f64;
    for i in 0..n.div_ceil(2) {
        x = match i {
            0 => {
                let nf = n as f64;
                (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0)
            }
            1 => x - 1.14 * (n as f64).powf(0.426) / x,
            2 => 1.86 * nodes[n - 2] - 0.86 * nodes[n - 1],
            3 => 1.91 * nodes[n - 3] - 0.91 * nodes[n - 2],
            _ => 2.0 * nodes[n - i] - nodes[n - i + 1],
        };
        for _ in 0..100 {
            let (pn, dpn, _) = hermite_eval(n, x);
            let dx = pn / dpn;
            x -= dx;
            if dx.abs() < 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        let (_, _, sumsq) = hermite_eval(n, x);
        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[n - 1 - i] = 1.0 / sumsq;
        weights[i] = weights[n - 1 - i];
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
        let (_, _, sumsq) = hermite_eval(n, 0.0);
        weights[n / 2] = 1.0 / sumsq;
    }
    Ok((nodes, weights))
}

/// Orthonormal Hermite recurrence at x: returns (p_n, p_n', sum_{k<n} p_k^2).
fn hermite_eval(n: usize, x: f64) -> (f64, f64, f64) {
    // p_0 = pi^(-1/4); p_{k+1} = x sqrt(2/(k+1)) p_k - sqrt(k/(k+1)) p_{k-1}.
    let mut pm = 0.0;
    let mut p = core::f64::consts::PI.powf(-0.25);
    let mut sumsq = 0.0;
    for k in 0..n {
        sumsq += p * p;
        let pn = x * (2.0 / (k as f64 + 1.0)).sqrt() * p
            - ((k as f64) / (k as f64 + 1.0)).sqrt() * pm;
        pm = p;
        p = pn;
    }
    // p' via p_n'(x) = sqrt(2n) p_{n-1}(x).
    let dp = (2.0 * n as f64).sqrt() * pm;
    (p, dp, sumsq)
}

/// Default nodes per axis for oracle-grade accuracy.
pub fn default_gh_nodes(r: usize) -> usize {
    if r <= 1 {
        64
    } else {
        32
    }
}

/// Gauss-Hermite marginal log-likelihood over standardized effects for
/// r in {1, 2} (tensor grid at r = 2). The rule is adaptive: nodes are
/// recentered at the posterior mode and rescaled by the inverse Cholesky
/// factor of the negative log-joint Hessian, so a Gaussian posterior is
/// integrated exactly at any node count and concentrated posteriors (many
/// observations per subject) keep their node coverage.
pub fn loglik_gh<M: Model + ?Sized>(
    model: &M,
    subject: &Subject,
    theta: &[f64],
    nodes: usize,
    ctx: &EvalCtx,
) -> Result<f64> {
    let r = model.n_eta();
    if r > 2 {
        return Err(Error::UnsupportedDimension { dim: r });
    }
    let joint = LogJoint {
        model,
        subject,
        theta,
        ctx,
    };
    let mode = maximize_log_joint(&joint, &vec![0.0; r], &subject.id)?;
    let (l, _) = boosted_chol(r, &mode.hess, 5).map_err(|_| Error::IndefiniteHessian {
        subject: subject.id.clone(),
    })?;
    let (xs, ws) = gauss_hermite(nodes)?;
    // With u = u* + sqrt(2) L^-T x and -H = L L^T, the log joint becomes
    // j(u*) - |x|^2 + O(cubic), so the quadrature sees a near-constant
    // integrand: marginal = 2^(r/2) / det(L) * sum prod(w) exp(|x|^2) p(y, u).
    let root2 = core::f64::consts::SQRT_2;
    let eval = |x: &[f64]| -> Result<f64> {
        let z = bwd_solve_t(r, &l, x);
        let u: Vec<f64> = mode.u.iter().zip(&z).map(|(m, zi)| m + root2 * zi).collect();
        ad::value(&joint, &u)
    };
    let mut terms = Vec::new();
    match r {
        1 => {
            for (x, w) in xs.iter().zip(&ws) {
                let g = point_value(eval(&[*x]))?;
                terms.push(w.ln() + x * x + g);
            }
        }
        2 => {
            for (xi, wi) in xs.iter().zip(&ws) {
                for (xj, wj) in xs.iter().zip(&ws) {
                    let g = point_value(eval(&[*xi, *xj]))?;
                    terms.push(wi.ln() + wj.ln() + xi * xi + xj * xj + g);
                }
            }
        }
        _ => unreachable!("r <= 2 checked above"),
    }
    let ls = logsumexp(&terms);
    let value = ls + 0.5 * r as f64 * core::f64::consts::LN_2 - log_det_lower(r, &l);
    if !value.is_finite() {
        return Err(Error::non_finite(format!(
            "quadrature marginal for subject {}",
            subject.id
        )));
    }
    Ok(value)
}

/// Node failures integrate as zero mass; structural errors propagate.
fn point_value(r: Result<f64>) -> Result<f64> {
    match r {
        Ok(v) if v.is_nan() => Ok(f64::NEG_INFINITY),
        Ok(v) => Ok(v),
        Err(e) if e.is_point_dependent() => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// Exact marginal log-likelihood for the models that admit one.
pub fn loglik_closed_form<M: Model + ?Sized>(
    model: &M,
    subject: &Subject,
    theta: &[f64],
) -> Result<f64> {
    match model.closed_form_loglik(subject, theta) {
        Some(v) => v,
        None => Err(Error::UnsupportedModel {
            name: String::from(model.name()),
            operation: String::from("a closed-form marginal log-likelihood"),
        }),
    }
}

/// Population report: importance sampling.
pub fn report_is<M: Model + ?Sized>(
    model: &M,
    subjects: &[Subject],
    theta: &[f64],
    proposals: &[VariationalState],
    m: usize,
    seed: u64,
    ctx: &EvalCtx,
) -> Result<LoglikReport> {
    if proposals.len() != subjects.len() {
        return Err(Error::dimension(
            "importance-sampling proposals",
            subjects.len(),
            proposals.len(),
        ));
    }
    let idx: Vec<usize> = (0..subjects.len()).collect();
    let per = crate::par::map_indexed(&idx, |i| {
        loglik_is(model, &subjects[i], theta, &proposals[i], m, seed, ctx)
    })?;
    let values: Vec<f64> = per.iter().map(|(v, _)| *v).collect();
    let ses: Vec<f64> = per.iter().map(|(_, s)| *s).collect();
    let mut report = LoglikReport::new("is", values);
    report.mc_se = Some(ses.iter().map(|s| s * s).sum::<f64>().sqrt());
    report.per_subject_mc_se = ses;
    report.samples = Some(m);
    Ok(report)
}

/// Population report: Laplace, started from per-subject standardized points
/// (zeros when none are given).
pub fn report_laplace<M: Model + ?Sized>(
    model: &M,
    subjects: &[Subject],
    theta: &[f64],
    inits: Option<&[Vec<f64>]>,
    ctx: &EvalCtx,
) -> Result<LoglikReport> {
    if let Some(inits) = inits {
        if inits.len() != subjects.len() {
            return Err(Error::dimension(
                "Laplace start points",
                subjects.len(),
                inits.len(),
            ));
        }
    }
    let r = model.n_eta();
    let idx: Vec<usize> = (0..subjects.len()).collect();
    let fits = crate::par::map_indexed(&idx, |i| {
        let zero = vec![0.0; r];
        let init = inits.map(|v| v[i].as_slice()).unwrap_or(&zero);
        loglik_laplace(model, &subjects[i], theta, init, ctx)
    })?;
    let mut report = LoglikReport::new("laplace", fits.iter().map(|f| f.value).collect());
    report.inner_iterations = fits.iter().map(|f| f.iterations).collect();
    report.inner_converged = fits.iter().map(|f| f.converged).collect();
    Ok(report)
}

/// Population report: Gauss-Hermite quadrature.
pub fn report_gh<M: Model + ?Sized>(
    model: &M,
    subjects: &[Subject],
    theta: &[f64],
    nodes: usize,
    ctx: &EvalCtx,
) -> Result<LoglikReport> {
    let idx: Vec<usize> = (0..subjects.len()).collect();
    let per = crate::par::map_indexed(&idx, |i| loglik_gh(model, &subjects[i], theta, nodes, ctx))?;
    let mut report = LoglikReport::new("gh", per);
    report.nodes = Some(nodes);
    Ok(report)
}

/// Population report: closed form.
pub fn report_closed_form<M: Model + ?Sized>(
    model: &M,
    subjects: &[Subject],
    theta: &[f64],
) -> Result<LoglikReport> {
    let idx: Vec<usize> = (0..subjects.len()).collect();
    let per = crate::par::map_indexed(&idx, |i| loglik_closed_form(model, &subjects[i], theta))?;
    Ok(LoglikReport::new("closed_form", per))
}

/// Population report: per-subject ELBO values under the given states.
pub fn report_elbo<M: Model + ?Sized>(
    model: &M,
    subjects: &[Subject],
    theta: &[f64],
    states: &[VariationalState],
    config: &ElboConfig,
    ctx: &EvalCtx,
) -> Result<LoglikReport> {
    if states.len() != subjects.len() {
        return Err(Error::dimension(
            "variational states",
            subjects.len(),
            states.len(),
        ));
    }
    let idx: Vec<usize> = (0..subjects.len()).collect();
    let per = crate::par::map_indexed(&idx, |i| {
        // Reporting is a one-shot evaluation; use the presampled stream.
        let draws = base_draws(
            config.seed,
            rng::subject_key(&subjects[i].id),
            0,
            config.m,
            states[i].r(),
        );
        elbo_subject(model, &subjects[i], theta, &states[i], &draws, ctx)
    })?;
    let mut report = LoglikReport::new("elbo", per);
    report.samples = Some(config.m);
    Ok(report)
}
