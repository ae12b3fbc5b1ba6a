use std::ops::{Add, Div, Mul, Neg, Sub};

use super::graph::Var;

/// Scalar-like values that model formulas are written against.
///
/// Implemented for plain `f64`, for graph handles [`Var`] (so the same
/// formula can be differentiated) and for [`Dual`] numbers (one extra
/// forward tangent on top of either).
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// A constant in the same context as `self`.
    fn lift(&self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn relu(self) -> Self;
    fn sigmoid(self) -> Self;
    fn square(self) -> Self;
    fn sqrt(self) -> Self;
    fn max(self, other: Self) -> Self;
    /// Indicator of `self > 0`; carries no derivative.
    fn step(self) -> Self;
}

impl Real for f64 {
    fn lift(&self, c: f64) -> Self {
        c
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn sigmoid(self) -> Self {
        1.0 / (1.0 + f64::exp(-self))
    }
    fn square(self) -> Self {
        self * self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn step(self) -> Self {
        if self > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

impl<'g> Real for Var<'g> {
    fn lift(&self, c: f64) -> Self {
        self.constant_like(c)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn relu(self) -> Self {
        Var::relu(self)
    }
    fn sigmoid(self) -> Self {
        Var::sigmoid(self)
    }
    fn square(self) -> Self {
        Var::square(self)
    }
    fn sqrt(self) -> Self {
        Var::sqrt(self)
    }
    fn max(self, other: Self) -> Self {
        Var::max(self, other)
    }
    fn step(self) -> Self {
        Var::step(self)
    }
}

/// First-order dual number `v + d·ε`.
#[derive(Clone, Copy, Debug)]
pub struct Dual<R> {
    pub v: R,
    pub d: R,
}

impl<R: Real> Dual<R> {
    pub fn new(v: R, d: R) -> Self {
        Self { v, d }
    }

    /// A value with zero tangent.
    pub fn constant(v: R) -> Self {
        let d = v.lift(0.0);
        Self { v, d }
    }

    /// The independent variable: tangent one.
    pub fn variable(v: R) -> Self {
        let d = v.lift(1.0);
        Self { v, d }
    }
}

impl<R: Real> Add for Dual<R> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl<R: Real> Sub for Dual<R> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl<R: Real> Mul for Dual<R> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl<R: Real> Div for Dual<R> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        Dual::new(q, (self.d - q * o.d) / o.v)
    }
}

impl<R: Real> Neg for Dual<R> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.v, -self.d)
    }
}

impl<R: Real> Add<f64> for Dual<R> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        Dual::new(self.v + c, self.d)
    }
}

impl<R: Real> Sub<f64> for Dual<R> {
    type Output = Self;
    fn sub(self, c: f64) -> Self {
        Dual::new(self.v - c, self.d)
    }
}

impl<R: Real> Mul<f64> for Dual<R> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        Dual::new(self.v * c, self.d * c)
    }
}

impl<R: Real> Div<f64> for Dual<R> {
    type Output = Self;
    fn div(self, c: f64) -> Self {
        Dual::new(self.v / c, self.d / c)
    }
}

impl<R: Real> Real for Dual<R> {
    fn lift(&self, c: f64) -> Self {
        Dual::constant(self.v.lift(c))
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.d * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.d / self.v)
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, self.d * (-(t * t) + 1.0))
    }
    fn relu(self) -> Self {
        Dual::new(self.v.relu(), self.d * self.v.step())
    }
    fn sigmoid(self) -> Self {
        let s = self.v.sigmoid();
        Dual::new(s, self.d * s * (-s + 1.0))
    }
    fn square(self) -> Self {
        Dual::new(self.v.square(), self.d * self.v * 2.0)
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        Dual::new(r, self.d / (r * 2.0))
    }
    fn max(self, other: Self) -> Self {
        // Ties select `self`, matching the graph op.
        let pick_self = -(other.v - self.v).step() + 1.0;
        Dual::new(self.v.max(other.v), other.d + (self.d - other.d) * pick_self)
    }
    fn step(self) -> Self {
        Dual::constant(self.v.step())
    }
}
