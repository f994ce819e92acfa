//! Reverse-mode tape: an append-only arena of nodes recorded during a primal
//! evaluation, swept backward once to produce all input adjoints.
//!
//! Layout invariants:
//! - parents always have smaller indices than children, so one reverse pass
//!   over the arena propagates every adjoint;
//! - `clear` keeps allocated capacity, so repeated evaluations (one per
//!   objective call) do not churn the allocator;
//! - a tape is confined to one thread (`RefCell`, not `Sync`); concurrency
//!   happens one tape per evaluation.
//!
//! Local partial derivatives are computed during recording, so the sweep is a
//! uniform multiply-accumulate loop. Inner products record as a single n-ary
//! node with operand indices and partials in side arenas; everything else is
//! unary or binary. Constants fold eagerly: arithmetic between tape-less
//! values records nothing, and a constant meeting a tape value materializes
//! as a `Const` node so the tape can be replayed from its own contents.

use super::Scalar;
use crate::error::{Error, Result};
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::ops::{Add, Div, Mul, Neg, Sub};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Powf,
    Sin,
    Cos,
    Tanh,
    Logistic,
    Softplus,
    Max,
    Min,
    Abs,
    /// n-ary inner product; `a` = start of the pair range in the side arenas,
    /// `b` = pair count.
    Dot,
    /// Escape hatch for externally computed values; has no adjoint rule.
    Custom(u16),
}

#[derive(Clone, Copy, Debug)]
struct Node<T> {
    op: Op,
    a: u32,
    b: u32,
    /// d(value)/d(node a), computed at record time.
    pa: T,
    /// d(value)/d(node b).
    pb: T,
    value: T,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    dot_ix: RefCell<Vec<u32>>,
    dot_pd: RefCell<Vec<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            dot_ix: RefCell::new(Vec::new()),
            dot_pd: RefCell::new(Vec::new()),
        }
    }

    /// Drop all nodes but keep capacity for the next recording.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.dot_ix.borrow_mut().clear();
        self.dot_pd.borrow_mut().clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(node);
        idx
    }

    /// Register a differentiation input.
    pub fn input(&self, value: T) -> Var<'_, T> {
        let idx = self.push(Node {
            op: Op::Input,
            a: NONE,
            b: NONE,
            pa: T::zero(),
            pb: T::zero(),
            value,
        });
        Var {
            tape: Some(self),
            idx,
            value,
        }
    }

    fn push_const(&self, value: T) -> u32 {
        self.push(Node {
            op: Op::Const,
            a: NONE,
            b: NONE,
            pa: T::zero(),
            pb: T::zero(),
            value,
        })
    }

    /// Ensure a value lives on this tape (a folded constant becomes a `Const`
    /// node). Needed when an objective's output never touched an input.
    pub fn materialize<'t>(&'t self, v: Var<'t, T>) -> Var<'t, T> {
        match v.tape {
            Some(t) => {
                debug_assert!(core::ptr::eq(t, self), "value from a different tape");
                v
            }
            None => Var {
                tape: Some(self),
                idx: self.push_const(v.value),
                value: v.value,
            },
        }
    }

    /// Record an opaque externally computed node. The reverse sweep reports
    /// `UnsupportedOp` when it reaches one: extensions must stay out of
    /// differentiated paths.
    pub fn custom<'t>(&'t self, op_id: u16, parents: &[Var<'t, T>], value: T) -> Var<'t, T> {
        let mut ab = [NONE; 2];
        for (slot, p) in ab.iter_mut().zip(parents.iter()) {
            *slot = self.materialize(*p).idx;
        }
        let idx = self.push(Node {
            op: Op::Custom(op_id),
            a: ab[0],
            b: ab[1],
            pa: T::zero(),
            pb: T::zero(),
            value,
        });
        Var {
            tape: Some(self),
            idx,
            value,
        }
    }

    /// Adjoint of every node with respect to `output`, in one backward sweep.
    pub fn adjoints(&self, output: Var<'_, T>) -> Result<Vec<T>> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![T::zero(); nodes.len()];
        if output.tape.is_none() {
            return Ok(adj); // constant output: gradient is zero everywhere
        }
        adj[output.idx as usize] = T::one();
        let dot_ix = self.dot_ix.borrow();
        let dot_pd = self.dot_pd.borrow();
        for i in (0..nodes.len()).rev() {
            let node = &nodes[i];
            match node.op {
                Op::Input | Op::Const => {}
                Op::Custom(op_id) => return Err(Error::UnsupportedOp { op_id, node: i }),
                Op::Dot => {
                    let w = adj[i];
                    let start = node.a as usize;
                    let count = 2 * node.b as usize;
                    for k in start..start + count {
                        let p = dot_ix[k] as usize;
                        adj[p] = adj[p] + dot_pd[k] * w;
                    }
                }
                _ => {
                    let w = adj[i];
                    adj[node.a as usize] = adj[node.a as usize] + node.pa * w;
                    if node.b != NONE {
                        adj[node.b as usize] = adj[node.b as usize] + node.pb * w;
                    }
                }
            }
        }
        Ok(adj)
    }

    /// Gradient of `output` with respect to the given input vars.
    pub fn gradient(&self, output: Var<'_, T>, inputs: &[Var<'_, T>]) -> Result<Vec<T>> {
        let adj = self.adjoints(output)?;
        Ok(inputs
            .iter()
            .map(|v| match v.tape {
                Some(_) => adj[v.idx as usize],
                None => T::zero(),
            })
            .collect())
    }

    /// Recompute every node value from its parents. Pure primitives reproduce
    /// the recorded values bit for bit; `Input`, `Const`, and `Custom` nodes
    /// replay their stored values.
    pub fn replay(&self) -> Vec<T> {
        let nodes = self.nodes.borrow();
        let dot_ix = self.dot_ix.borrow();
        let mut r: Vec<T> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let a = || r[node.a as usize];
            let b = || r[node.b as usize];
            let v = match node.op {
                Op::Input | Op::Const | Op::Custom(_) => node.value,
                Op::Add => a() + b(),
                Op::Sub => a() - b(),
                Op::Mul => a() * b(),
                Op::Div => a() / b(),
                Op::Neg => -a(),
                Op::Exp => a().exp(),
                Op::Ln => a().ln(),
                Op::Sqrt => a().sqrt(),
                Op::Powf => a().powf(b()),
                Op::Sin => a().sin(),
                Op::Cos => a().cos(),
                Op::Tanh => a().tanh(),
                Op::Logistic => a().logistic(),
                Op::Softplus => a().softplus(),
                Op::Max => a().fmax(b()),
                Op::Min => a().fmin(b()),
                Op::Abs => a().abs(),
                Op::Dot => {
                    let start = node.a as usize;
                    let count = node.b as usize;
                    let mut acc = T::zero();
                    for k in 0..count {
                        acc = acc
                            + r[dot_ix[start + 2 * k] as usize] * r[dot_ix[start + 2 * k + 1] as usize];
                    }
                    acc
                }
            };
            r.push(v);
        }
        r
    }

    /// Stored value of every node, aligned with [`Tape::replay`].
    pub fn recorded_values(&self) -> Vec<T> {
        self.nodes.borrow().iter().map(|n| n.value).collect()
    }
}

/// A value recorded on a tape, or a folded constant not (yet) on any tape.
/// Cheap to copy; arithmetic between two constants records nothing.
#[derive(Clone, Copy, Debug)]
pub struct Var<'t, T> {
    tape: Option<&'t Tape<T>>,
    idx: u32,
    value: T,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(self) -> T {
        self.value
    }

    /// Index on the tape; `None` for folded constants.
    pub fn index(self) -> Option<usize> {
        self.tape.map(|_| self.idx as usize)
    }

    fn constant_val(value: T) -> Self {
        Var {
            tape: None,
            idx: NONE,
            value,
        }
    }

    fn on(self, tape: &'t Tape<T>) -> u32 {
        tape.materialize(self).idx
    }

    fn binary(self, rhs: Self, op: Op, value: T, pa: T, pb: T) -> Self {
        let tape = match (self.tape, rhs.tape) {
            (None, None) => return Var::constant_val(value),
            (Some(t), _) => t,
            (None, Some(t)) => t,
        };
        let a = self.on(tape);
        let b = rhs.on(tape);
        let idx = tape.push(Node {
            op,
            a,
            b,
            pa,
            pb,
            value,
        });
        Var {
            tape: Some(tape),
            idx,
            value,
        }
    }

    fn unary(self, op: Op, value: T, pa: T) -> Self {
        let Some(tape) = self.tape else {
            return Var::constant_val(value);
        };
        let idx = tape.push(Node {
            op,
            a: self.idx,
            b: NONE,
            pa,
            pb: T::zero(),
            value,
        });
        Var {
            tape: Some(tape),
            idx,
            value,
        }
    }
}

impl<'t, T: Scalar> Add for Var<'t, T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.binary(o, Op::Add, self.value + o.value, T::one(), T::one())
    }
}

impl<'t, T: Scalar> Sub for Var<'t, T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.binary(o, Op::Sub, self.value - o.value, T::one(), -T::one())
    }
}

impl<'t, T: Scalar> Mul for Var<'t, T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.binary(o, Op::Mul, self.value * o.value, o.value, self.value)
    }
}

impl<'t, T: Scalar> Div for Var<'t, T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let value = self.value / o.value;
        self.binary(o, Op::Div, value, o.value.recip(), -value / o.value)
    }
}

impl<'t, T: Scalar> Neg for Var<'t, T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(Op::Neg, -self.value, -T::one())
    }
}

impl<'t, T: Scalar> Scalar for Var<'t, T> {
    fn constant(v: f64) -> Self {
        Var::constant_val(T::constant(v))
    }

    fn primal(self) -> f64 {
        self.value.primal()
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(Op::Exp, e, e)
    }

    fn ln(self) -> Self {
        self.unary(Op::Ln, self.value.ln(), self.value.recip())
    }

    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.unary(Op::Sqrt, s, (T::constant(2.0) * s).recip())
    }

    fn powf(self, e: Self) -> Self {
        let value = self.value.powf(e.value);
        let pa = e.value * self.value.powf(e.value - T::one());
        let pb = value * self.value.ln();
        self.binary(e, Op::Powf, value, pa, pb)
    }

    fn sin(self) -> Self {
        self.unary(Op::Sin, self.value.sin(), self.value.cos())
    }

    fn cos(self) -> Self {
        self.unary(Op::Cos, self.value.cos(), -self.value.sin())
    }

    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(Op::Tanh, t, T::one() - t * t)
    }

    fn logistic(self) -> Self {
        let s = self.value.logistic();
        self.unary(Op::Logistic, s, s * (T::one() - s))
    }

    fn softplus(self) -> Self {
        self.unary(Op::Softplus, self.value.softplus(), self.value.logistic())
    }

    fn fmax(self, o: Self) -> Self {
        if self.value.primal() >= o.value.primal() {
            self.binary(o, Op::Max, self.value, T::one(), T::zero())
        } else {
            self.binary(o, Op::Max, o.value, T::zero(), T::one())
        }
    }

    fn fmin(self, o: Self) -> Self {
        if self.value.primal() <= o.value.primal() {
            self.binary(o, Op::Min, self.value, T::one(), T::zero())
        } else {
            self.binary(o, Op::Min, o.value, T::zero(), T::one())
        }
    }

    fn abs(self) -> Self {
        let p = self.value.primal();
        let sign = if p > 0.0 {
            T::one()
        } else if p < 0.0 {
            -T::one()
        } else {
            T::zero()
        };
        self.unary(Op::Abs, self.value.abs(), sign)
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        assert_eq!(a.len(), b.len(), "dot operand lengths differ");
        let tape = a
            .iter()
            .chain(b.iter())
            .find_map(|v| v.tape);
        let Some(tape) = tape else {
            let mut acc = T::zero();
            for k in 0..a.len() {
                acc = acc + a[k].value * b[k].value;
            }
            return Var::constant_val(acc);
        };
        let mut acc = T::zero();
        let start;
        {
            let mut dot_ix = tape.dot_ix.borrow_mut();
            let mut dot_pd = tape.dot_pd.borrow_mut();
            start = dot_ix.len() as u32;
            for k in 0..a.len() {
                let ia = a[k].on(tape);
                let ib = b[k].on(tape);
                dot_ix.push(ia);
                dot_ix.push(ib);
                dot_pd.push(b[k].value);
                dot_pd.push(a[k].value);
                acc = acc + a[k].value * b[k].value;
            }
        }
        let idx = tape.push(Node {
            op: Op::Dot,
            a: start,
            b: a.len() as u32,
            pa: T::zero(),
            pb: T::zero(),
            value: acc,
        });
        Var {
            tape: Some(tape),
            idx,
            value: acc,
        }
    }
}
