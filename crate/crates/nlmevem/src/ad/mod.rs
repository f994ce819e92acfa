//! Automatic differentiation: one scalar abstraction, three instantiations.
//!
//! Model, solver, and objective code are written once against [`Scalar`] and
//! then run as:
//!
//! - `f64` for plain values,
//! - [`Dual`] for forward mode (a fixed-width tangent chunk rides along with
//!   every value),
//! - [`Var`] for reverse mode (operations append to a [`Tape`] arena; one
//!   backward sweep yields all input adjoints).
//!
//! Nesting gives second order: recording a tape over `Dual` values
//! ([`hessian`], forward-over-reverse) or stacking duals
//! ([`hessian_forward`], forward-over-forward for code that cannot be taped).
//!
//! Branch rules are shared by all instantiations: `fmax`/`fmin` follow the
//! branch selected by primal comparison with ties going to the first
//! argument, and `abs` uses subgradient 0 at 0. Arithmetic is op-for-op
//! identical across instantiations, so primal values match bit for bit.

pub mod dual;
pub(crate) mod math;
pub mod tape;

use crate::error::{Error, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{Add, Div, Mul, Neg, Sub};

pub use dual::Dual;
pub use tape::{Tape, Var};

/// Tangent lanes carried by one forward pass; gradients of `n` inputs take
/// `ceil(n / chunk)` passes.
pub const DEFAULT_CHUNK: usize = 8;

/// Differentiable scalar. The primitive set is closed: everything a model may
/// do with parameters must pass through these operations.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Lift a constant. Constants carry no derivative information.
    fn constant(v: f64) -> Self;

    /// Innermost plain value (recurses through nested duals).
    fn primal(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    /// `self^e`. Differentiation requires a positive base when the exponent
    /// itself carries derivatives.
    fn powf(self, e: Self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn logistic(self) -> Self;
    fn softplus(self) -> Self;

    /// Branch by primal comparison; ties take `self`.
    fn fmax(self, o: Self) -> Self;
    /// Branch by primal comparison; ties take `self`.
    fn fmin(self, o: Self) -> Self;
    /// Subgradient 0 at 0.
    fn abs(self) -> Self;

    /// Integer power as a left-to-right product so every instantiation
    /// computes the identical value.
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        let neg = n < 0;
        let mut acc = self;
        for _ in 1..n.unsigned_abs() {
            acc = acc * self;
        }
        if neg {
            Self::one() / acc
        } else {
            acc
        }
    }

    /// Sequential inner product. Reverse mode overrides this with a single
    /// n-ary tape node; the accumulation order (k = 0, 1, ...) is part of the
    /// contract so values stay identical across instantiations.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        assert_eq!(a.len(), b.len(), "dot operand lengths differ");
        let mut acc = Self::zero();
        for k in 0..a.len() {
            acc = acc + a[k] * b[k];
        }
        acc
    }

    fn zero() -> Self {
        Self::constant(0.0)
    }

    fn one() -> Self {
        Self::constant(1.0)
    }

    fn recip(self) -> Self {
        Self::one() / self
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn constant(v: f64) -> f64 {
        v
    }
    #[inline(always)]
    fn primal(self) -> f64 {
        self
    }
    #[inline(always)]
    fn exp(self) -> f64 {
        math::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> f64 {
        math::ln(self)
    }
    #[inline(always)]
    fn sqrt(self) -> f64 {
        math::sqrt(self)
    }
    #[inline(always)]
    fn powf(self, e: f64) -> f64 {
        math::powf(self, e)
    }
    #[inline(always)]
    fn sin(self) -> f64 {
        math::sin(self)
    }
    #[inline(always)]
    fn cos(self) -> f64 {
        math::cos(self)
    }
    #[inline(always)]
    fn tanh(self) -> f64 {
        math::tanh(self)
    }
    #[inline(always)]
    fn logistic(self) -> f64 {
        math::logistic(self)
    }
    #[inline(always)]
    fn softplus(self) -> f64 {
        math::softplus(self)
    }
    #[inline(always)]
    fn fmax(self, o: f64) -> f64 {
        if self >= o {
            self
        } else {
            o
        }
    }
    #[inline(always)]
    fn fmin(self, o: f64) -> f64 {
        if self <= o {
            self
        } else {
            o
        }
    }
    #[inline(always)]
    fn abs(self) -> f64 {
        math::abs(self)
    }
}

/// An objective usable under every scalar instantiation. Implementors write
/// the body once, generically; the drivers below choose the instantiation.
pub trait DiffFn {
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<S>;
}

/// Which first-order mode evaluates a gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdMode {
    Forward,
    Reverse,
}

/// Plain evaluation, no derivatives.
pub fn value<F: DiffFn>(f: &F, x: &[f64]) -> Result<f64> {
    f.eval::<f64>(x)
}

/// Forward-mode gradient: `ceil(n / chunk)` seeded evaluations with up to
/// `chunk` (clamped to 1..=8) tangent lanes each. Returns `(f(x), grad f(x))`.
pub fn grad_forward<F: DiffFn>(f: &F, x: &[f64], chunk: usize) -> Result<(f64, Vec<f64>)> {
    let n = x.len();
    let c = chunk.clamp(1, DEFAULT_CHUNK);
    let mut grad = vec![0.0; n];
    let mut val = 0.0;
    let mut start = 0;
    let mut pass = 0usize;
    if n == 0 {
        return Ok((f.eval::<f64>(x)?, grad));
    }
    while start < n {
        let width = c.min(n - start);
        let xs: Vec<Dual<DEFAULT_CHUNK, f64>> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut d = Dual::constant(v);
                if i >= start && i < start + width {
                    d.tangent[i - start] = 1.0;
                }
                d
            })
            .collect();
        let out = f.eval(&xs)?;
        if !out.value.is_finite() || out.tangent[..width].iter().any(|t| !t.is_finite()) {
            return Err(Error::non_finite(format!(
                "forward-mode chunk {pass} (inputs {start}..{})",
                start + width
            )));
        }
        val = out.value;
        grad[start..start + width].copy_from_slice(&out.tangent[..width]);
        start += width;
        pass += 1;
    }
    Ok((val, grad))
}

/// Reverse-mode gradient: record once on `tape` (cleared first, capacity
/// kept), sweep once. Returns `(f(x), grad f(x))`.
pub fn grad_reverse_with<F: DiffFn>(f: &F, x: &[f64], tape: &Tape<f64>) -> Result<(f64, Vec<f64>)> {
    tape.clear();
    let inputs: Vec<Var<'_, f64>> = x.iter().map(|&v| tape.input(v)).collect();
    let out = f.eval(&inputs)?;
    let out = tape.materialize(out);
    if !out.value().is_finite() {
        return Err(Error::non_finite("reverse-mode primal output"));
    }
    let grad = tape.gradient(out, &inputs)?;
    Ok((out.value(), grad))
}

/// Reverse-mode gradient on a fresh tape.
pub fn grad_reverse<F: DiffFn>(f: &F, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    grad_reverse_with(f, x, &tape)
}

/// Gradient in the requested mode.
pub fn gradient<F: DiffFn>(f: &F, x: &[f64], mode: AdMode) -> Result<(f64, Vec<f64>)> {
    match mode {
        AdMode::Forward => grad_forward(f, x, DEFAULT_CHUNK),
        AdMode::Reverse => grad_reverse(f, x),
    }
}

/// Dense Hessian by forward-over-reverse: tape arithmetic over dual numbers,
/// 8 columns per recording. Returned matrix is symmetrized, (H + H^T)/2.
pub fn hessian<F: DiffFn>(f: &F, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = x.len();
    let mut h = vec![vec![0.0; n]; n];
    let mut start = 0;
    while start < n {
        let width = DEFAULT_CHUNK.min(n - start);
        let tape: Tape<Dual<DEFAULT_CHUNK, f64>> = Tape::new();
        let inputs: Vec<Var<'_, Dual<DEFAULT_CHUNK, f64>>> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut d = Dual::constant(v);
                if i >= start && i < start + width {
                    d.tangent[i - start] = 1.0;
                }
                tape.input(d)
            })
            .collect();
        let out = f.eval(&inputs)?;
        let out = tape.materialize(out);
        let adj = tape.gradient(out, &inputs)?;
        for (i, a) in adj.iter().enumerate() {
            for l in 0..width {
                h[i][start + l] = a.tangent[l];
            }
        }
        start += width;
    }
    symmetrize(&mut h);
    Ok(h)
}

/// Dense Hessian by forward-over-forward (for objectives that cannot be
/// taped): stacked duals, one row chunk times one column chunk per pass.
/// Returned matrix is symmetrized.
pub fn hessian_forward<F: DiffFn>(f: &F, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = x.len();
    let mut h = vec![vec![0.0; n]; n];
    let mut rs = 0;
    while rs < n {
        let rw = DEFAULT_CHUNK.min(n - rs);
        let mut cs = 0;
        while cs < n {
            let cw = DEFAULT_CHUNK.min(n - cs);
            let xs: Vec<Dual<DEFAULT_CHUNK, Dual<DEFAULT_CHUNK, f64>>> = x
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let mut inner = Dual::<DEFAULT_CHUNK, f64>::constant(v);
                    if i >= cs && i < cs + cw {
                        inner.tangent[i - cs] = 1.0;
                    }
                    let mut outer = Dual::<DEFAULT_CHUNK, Dual<DEFAULT_CHUNK, f64>>::new(inner);
                    if i >= rs && i < rs + rw {
                        outer.tangent[i - rs] = Dual::<DEFAULT_CHUNK, f64>::constant(1.0);
                    }
                    outer
                })
                .collect();
            let out = f.eval(&xs)?;
            for r in 0..rw {
                for c in 0..cw {
                    h[rs + r][cs + c] = out.tangent[r].tangent[c];
                }
            }
            cs += cw;
        }
        rs += rw;
    }
    symmetrize(&mut h);
    Ok(h)
}

fn symmetrize(h: &mut [Vec<f64>]) {
    let n = h.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (h[i][j] + h[j][i]);
            h[i][j] = m;
            h[j][i] = m;
        }
    }
}
