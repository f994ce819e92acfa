//! The two optimizers the fitting loop uses: L-BFGS with a backtracking
//! line search for deterministic objectives, and Adam with gradient clipping
//! and learning-rate decay for stochastic ones. Both maximize.
//!
//! L-BFGS runs internally as a minimizer of the negated objective, which
//! keeps the two-loop recursion and Armijo test in their textbook signs.
//! Callback failures reported as non-finite values make the current trial
//! step fail (L-BFGS backtracks, Adam skips and halves the learning rate);
//! every other error aborts the optimization.

use crate::error::{Error, Result};
use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone)]
pub struct LbfgsConfig {
    /// Curvature pairs retained by the two-loop recursion.
    pub memory: usize,
    /// Armijo sufficient-increase constant.
    pub c1: f64,
    /// Step shrink factor per rejected trial.
    pub backtrack: f64,
    /// Trials per line search before declaring failure.
    pub max_ls_trials: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub grad_norm_tol: f64,
    /// Stop when |f_new - f_old| <= tol * (1 + |f_new|).
    pub rel_obj_tol: f64,
    pub max_iters: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            c1: 1e-4,
            backtrack: 0.5,
            max_ls_trials: 40,
            grad_norm_tol: 1e-3,
            rel_obj_tol: 1e-5,
            max_iters: 500,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory < 1 {
            return Err(Error::config("L-BFGS memory must be >= 1"));
        }
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            return Err(Error::config("Armijo constant must lie in (0, 1)"));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::config("backtrack factor must lie in (0, 1)"));
        }
        if self.max_ls_trials < 1 || self.max_iters < 1 {
            return Err(Error::config("iteration budgets must be >= 1"));
        }
        if !(self.grad_norm_tol > 0.0) || !(self.rel_obj_tol > 0.0) {
            return Err(Error::config("tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning rate is multiplied by this every iteration.
    pub decay: f64,
    /// Gradients with a larger 2-norm are rescaled onto this sphere.
    pub clip_norm: f64,
    pub max_iters: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay: 0.999,
            clip_norm: 1e3,
            max_iters: 500,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::config(
                "learning rate, epsilon, and clip norm must be positive",
            ));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("decay must lie in (0, 1]"));
        }
        if self.max_iters < 1 {
            return Err(Error::config("iteration budgets must be >= 1"));
        }
        Ok(())
    }
}

/// Why an optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Gradient infinity norm under tolerance.
    GradNorm,
    /// Relative objective change under tolerance.
    RelObj,
    MaxIters,
    /// No acceptable step along the search direction, even after a
    /// steepest-ascent restart.
    LineSearchFailed,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::GradNorm => "grad_norm",
            Termination::RelObj => "rel_obj",
            Termination::MaxIters => "max_iters",
            Termination::LineSearchFailed => "line_search_failed",
        }
    }
}

/// One accepted iteration.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub iteration: usize,
    pub objective: f64,
    /// Gradient infinity norm at the accepted point.
    pub grad_norm: f64,
    /// Accepted step length (L-BFGS) or the learning rate used (Adam).
    pub step_size: f64,
    /// Seconds since the optimizer started; 0 without the `std` feature.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub trace: Vec<IterationTrace>,
    pub termination: Termination,
    /// Objective/gradient callback invocations.
    pub evals: usize,
    /// Adam iterations skipped because the gradient came back non-finite.
    pub skipped_steps: usize,
}

struct Stopwatch {
    #[cfg(feature = "std")]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Stopwatch {
            #[cfg(feature = "std")]
            start: std::time::Instant::now(),
        }
    }

    #[cfg(feature = "std")]
    fn seconds(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    #[cfg(not(feature = "std"))]
    fn seconds(&self) -> f64 {
        0.0
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &x| a.max(x.abs()))
}

fn two_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bounded store of curvature pairs (s, y) with rho = 1/s'y, oldest evicted
/// first. Pairs whose s'y is not safely positive are refused so the implicit
/// inverse Hessian stays positive definite.
struct CurvatureMemory {
    cap: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl CurvatureMemory {
    fn new(cap: usize) -> Self {
        CurvatureMemory {
            cap,
            pairs: VecDeque::with_capacity(cap),
        }
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if sy <= 1e-10 * two_norm(&s) * two_norm(&y) {
            return;
        }
        if self.pairs.len() == self.cap {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion: returns the descent direction -H * grad for the
    /// minimized objective.
    #[cfg(test)]
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        if self.pairs.is_empty() {
            let scale = -1.0 / inf_norm(grad).max(1.0);
            for v in q.iter_mut() {
                *v *= scale;
            }
            return q;
        }
        let k = self.pairs.len();
        let mut alpha = vec![0.0; k];
        for (i, (s, y, rho)) in self.pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &q);
            alpha[i] = a;
            for (qv, yv) in q.iter_mut().zip(y) {
                *qv -= a * yv;
            }
        }
        let (s_last, y_last, _) = self.pairs.back().expect("nonempty");
        let gamma = dot(s_last, y_last) / dot(y_last, y_last);
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for (i, (s, y, rho)) in self.pairs.iter().enumerate() {
            let beta = rho * dot(y, &q);
            for (qv, sv) in q.iter_mut().zip(s) {
                *qv += (alpha[i] - beta) * sv;
            }
        }
        for v in q.iter_mut() {
            *v = -*v;
        }
        q
    }

}

/// A callback failure that only means "this point is bad" rather than "the
/// problem is malformed".
fn is_point_failure(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// Consecutive small relative objective changes required before the
/// change-based stop fires. One isolated short step (a poor curvature
/// direction mid-run) must not read as convergence.
const REL_OBJ_PATIENCE: usize = 3;

/// Maximize a deterministic objective with L-BFGS and a backtracking Armijo
/// line search. The callback returns the objective and its gradient.
pub fn maximize_lbfgs<F>(mut f: F, x0: &[f64], config: &LbfgsConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    config.validate()?;
    let watch = Stopwatch::start();
    let mut evals = 0usize;

    let mut x = x0.to_vec();
    let (f0, g0) = f(&x)?;
    evals += 1;
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("objective at the starting point"));
    }
    // Internal minimization state: value and gradient of -f.
    let mut val = -f0;
    let mut grad: Vec<f64> = g0.iter().map(|v| -v).collect();
    let mut memory = CurvatureMemory::new(config.memory);
    let mut trace: Vec<IterationTrace> = Vec::new();

    let mut termination = Termination::MaxIters;
    let mut small_changes = 0usize;
    if inf_norm(&grad) <= config.grad_norm_tol {
        termination = Termination::GradNorm;
    } else {
        for iteration in 1..=config.max_iters {
            let mut dir = memory.direction(&grad);
            // A rounded or stale direction may fail to descend; retry steepest.
            if dot(&dir, &grad) >= 0.0 {
                dir = CurvatureMemory::new(config.memory).direction(&grad);
            }

            let mut accepted: Option<(f64, f64, Vec<f64>)> = None;
            let mut restarted = false;
            loop {
                let slope = dot(&grad, &dir);
                let mut t = 1.0;
                for _ in 0..config.max_ls_trials {
                    let xt: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + t * di).collect();
                    evals += 1;
                    match f(&xt) {
                        Ok((ft, gt)) => {
                            let vt = -ft;
                            let usable = vt.is_finite() && gt.iter().all(|v| v.is_finite());
                            if usable && vt <= val + config.c1 * t * slope {
                                let gt: Vec<f64> = gt.iter().map(|v| -v).collect();
                                let s: Vec<f64> =
                                    xt.iter().zip(&x).map(|(a, b)| a - b).collect();
                                let y: Vec<f64> =
                                    gt.iter().zip(&grad).map(|(a, b)| a - b).collect();
                                memory.push(s, y);
                                grad = gt;
                                accepted = Some((t, vt, xt));
                                break;
                            }
                        }
                        Err(e) if is_point_failure(&e) => {}
                        Err(e) => return Err(e),
                    }
                    t *= config.backtrack;
                }
                if accepted.is_some() || restarted {
                    break;
                }
                // One steepest-ascent restart before giving up.
                restarted = true;
                memory = CurvatureMemory::new(config.memory);
                dir = memory.direction(&grad);
            }

            let Some((t, new_val, new_x)) = accepted else {
                termination = Termination::LineSearchFailed;
                break;
            };
            let old_val = val;
            val = new_val;
            x = new_x;
            let gnorm = inf_norm(&grad);
            trace.push(IterationTrace {
                iteration,
                objective: -val,
                grad_norm: gnorm,
                step_size: t,
                wall_time_s: watch.seconds(),
            });
            if gnorm <= config.grad_norm_tol {
                termination = Termination::GradNorm;
                break;
            }
            if (old_val - val).abs() <= config.rel_obj_tol * (1.0 + val.abs()) {
                small_changes += 1;
                if small_changes >= REL_OBJ_PATIENCE {
                    termination = Termination::RelObj;
                    break;
                }
            } else {
                small_changes = 0;
            }
        }
    }

    Ok(OptimResult {
        x,
        objective: -val,
        trace,
        termination,
        evals,
        skipped_steps: 0,
    })
}

/// Maximize a (possibly stochastic) objective with Adam. The callback
/// receives the 1-based iteration so resampling objectives can key their
/// draws; it returns the objective value and gradient at the current point.
/// Runs for the full iteration budget: there is no gradient-based stop on a
/// stochastic objective.
pub fn maximize_adam<F>(mut f: F, x0: &[f64], config: &AdamConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64], u64) -> Result<(f64, Vec<f64>)>,
{
    config.validate()?;
    let watch = Stopwatch::start();
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut lr = config.learning_rate;
    let mut evals = 0usize;
    let mut skipped = 0usize;
    let mut trace = Vec::new();
    let mut last_objective = f64::NEG_INFINITY;

    let mut beta1_pow = 1.0;
    let mut beta2_pow = 1.0;
    for iteration in 1..=config.max_iters {
        evals += 1;
        let (fv, mut g) = match f(&x, iteration as u64) {
            Ok(pair) => pair,
            Err(e) if is_point_failure(&e) => {
                skipped += 1;
                lr *= 0.5;
                continue;
            }
            Err(e) => return Err(e),
        };
        if !fv.is_finite() || g.iter().any(|gi| !gi.is_finite()) {
            skipped += 1;
            lr *= 0.5;
            continue;
        }
        let gnorm2 = two_norm(&g);
        if gnorm2 > config.clip_norm {
            let scale = config.clip_norm / gnorm2;
            for gi in g.iter_mut() {
                *gi *= scale;
            }
        }
        beta1_pow *= config.beta1;
        beta2_pow *= config.beta2;
        for i in 0..n {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - beta1_pow);
            let v_hat = v[i] / (1.0 - beta2_pow);
            x[i] += lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        trace.push(IterationTrace {
            iteration,
            objective: fv,
            grad_norm: inf_norm(&g),
            step_size: lr,
            wall_time_s: watch.seconds(),
        });
        last_objective = fv;
        lr *= config.decay;
    }

    Ok(OptimResult {
        x,
        objective: last_objective,
        trace,
        termination: Termination::MaxIters,
        evals,
        skipped_steps: skipped,
    })
}
