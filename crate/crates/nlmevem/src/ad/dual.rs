//! Forward-mode dual numbers with a fixed-width tangent chunk.
//!
//! `Dual<K, T>` carries a value and `K` tangent lanes, each of component type
//! `T`. With `T = f64` this is ordinary chunked forward mode; with
//! `T = Dual<K, f64>` it stacks into forward-over-forward second order.

use super::Scalar;
use core::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const K: usize, T> {
    pub value: T,
    pub tangent: [T; K],
}

impl<const K: usize, T: Scalar> Dual<K, T> {
    /// A value with zero tangents.
    pub fn new(value: T) -> Self {
        Dual {
            value,
            tangent: [T::zero(); K],
        }
    }

    /// A value with tangent lane `lane` seeded to one.
    pub fn seeded(value: T, lane: usize) -> Self {
        let mut d = Dual::new(value);
        d.tangent[lane] = T::one();
        d
    }

    fn map_tangent(self, value: T, df: T) -> Self {
        let mut t = self.tangent;
        for l in t.iter_mut() {
            *l = *l * df;
        }
        Dual { value, tangent: t }
    }
}

impl<const K: usize, T: Scalar> Add for Dual<K, T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut t = self.tangent;
        for (l, r) in t.iter_mut().zip(o.tangent.iter()) {
            *l = *l + *r;
        }
        Dual {
            value: self.value + o.value,
            tangent: t,
        }
    }
}

impl<const K: usize, T: Scalar> Sub for Dual<K, T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut t = self.tangent;
        for (l, r) in t.iter_mut().zip(o.tangent.iter()) {
            *l = *l - *r;
        }
        Dual {
            value: self.value - o.value,
            tangent: t,
        }
    }
}

impl<const K: usize, T: Scalar> Mul for Dual<K, T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut t = self.tangent;
        for (l, r) in t.iter_mut().zip(o.tangent.iter()) {
            *l = *l * o.value + self.value * *r;
        }
        Dual {
            value: self.value * o.value,
            tangent: t,
        }
    }
}

impl<const K: usize, T: Scalar> Div for Dual<K, T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let value = self.value / o.value;
        let mut t = self.tangent;
        for (l, r) in t.iter_mut().zip(o.tangent.iter()) {
            *l = (*l - value * *r) / o.value;
        }
        Dual { value, tangent: t }
    }
}

impl<const K: usize, T: Scalar> Neg for Dual<K, T> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut t = self.tangent;
        for l in t.iter_mut() {
            *l = -*l;
        }
        Dual {
            value: -self.value,
            tangent: t,
        }
    }
}

impl<const K: usize, T: Scalar> Scalar for Dual<K, T> {
    fn constant(v: f64) -> Self {
        Dual::new(T::constant(v))
    }

    fn primal(self) -> f64 {
        self.value.primal()
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.map_tangent(e, e)
    }

    fn ln(self) -> Self {
        let v = self.value.ln();
        self.map_tangent(v, self.value.recip())
    }

    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.map_tangent(s, (T::constant(2.0) * s).recip())
    }

    fn powf(self, e: Self) -> Self {
        let value = self.value.powf(e.value);
        // d/da a^b = b a^(b-1); d/db a^b = a^b ln a
        let da = e.value * self.value.powf(e.value - T::one());
        let db = value * self.value.ln();
        let mut t = self.tangent;
        for (l, r) in t.iter_mut().zip(e.tangent.iter()) {
            *l = *l * da + *r * db;
        }
        Dual { value, tangent: t }
    }

    fn sin(self) -> Self {
        self.map_tangent(self.value.sin(), self.value.cos())
    }

    fn cos(self) -> Self {
        self.map_tangent(self.value.cos(), -self.value.sin())
    }

    fn tanh(self) -> Self {
        let v = self.value.tanh();
        self.map_tangent(v, T::one() - v * v)
    }

    fn logistic(self) -> Self {
        let s = self.value.logistic();
        self.map_tangent(s, s * (T::one() - s))
    }

    fn softplus(self) -> Self {
        self.map_tangent(self.value.softplus(), self.value.logistic())
    }

    fn fmax(self, o: Self) -> Self {
        if self.value.primal() >= o.value.primal() {
            self
        } else {
            o
        }
    }

    fn fmin(self, o: Self) -> Self {
        if self.value.primal() <= o.value.primal() {
            self
        } else {
            o
        }
    }

    fn abs(self) -> Self {
        let p = self.value.primal();
        if p > 0.0 {
            self
        } else if p < 0.0 {
            -self
        } else {
            Dual::new(self.value.abs())
        }
    }
}
