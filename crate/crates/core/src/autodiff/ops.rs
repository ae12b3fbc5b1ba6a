use std::ops::{Add, Div, Mul, Neg, Sub};

use super::graph::{BinaryOp, UnaryOp, Var};

macro_rules! var_binop {
    ($trait:ident, $method:ident, $op:expr) => {
        impl<'g> $trait<Var<'g>> for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                self.binary($op, rhs)
            }
        }
    };
}

var_binop!(Add, add, BinaryOp::Add);
var_binop!(Sub, sub, BinaryOp::Sub);
var_binop!(Mul, mul, BinaryOp::Mul);
var_binop!(Div, div, BinaryOp::Div);

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.unary(UnaryOp::Neg)
    }
}

impl<'g> Add<f64> for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: f64) -> Var<'g> {
        self.unary(UnaryOp::Shift(rhs))
    }
}

impl<'g> Sub<f64> for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: f64) -> Var<'g> {
        self.unary(UnaryOp::Shift(-rhs))
    }
}

impl<'g> Mul<f64> for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: f64) -> Var<'g> {
        self.unary(UnaryOp::Scale(rhs))
    }
}

impl<'g> Div<f64> for Var<'g> {
    type Output = Var<'g>;
    fn div(self, rhs: f64) -> Var<'g> {
        self.unary(UnaryOp::Scale(1.0 / rhs))
    }
}

impl<'g> Add<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        rhs + self
    }
}

impl<'g> Sub<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        (-rhs) + self
    }
}

impl<'g> Mul<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        rhs * self
    }
}

impl<'g> Div<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn div(self, rhs: Var<'g>) -> Var<'g> {
        rhs.constant_like(self) / rhs
    }
}
