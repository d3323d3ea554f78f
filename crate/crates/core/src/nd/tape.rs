//! Scalar reverse-mode differentiation with differentiable gradients.
//!
//! Every gradient produced by [`Tape::grad`] is itself recorded on the tape,
//! so a loss may contain input-gradients and still be differentiated with
//! respect to parameters. This is the general-purpose route; the batched
//! network kernels in `energy_model` are checked against it.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddConst(usize),
    MulConst(usize, f64),
    Exp(usize),
    Ln(usize),
    Sin(usize),
    Cos(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Sqrt(usize),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    value: f64,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<bool>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, op: Op, value: f64) -> Var<'_> {
        if !value.is_finite() {
            self.fault.set(true);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    /// A constant; identical to a leaf that is never differentiated against.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True once any recorded value has been NaN or infinite.
    pub fn faulted(&self) -> bool {
        self.fault.get()
    }

    /// Gradient of `y` with respect to each of `wrt`, recorded on the tape so
    /// it can be differentiated again.
    pub fn grad<'t>(&'t self, y: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        let n = y.idx + 1;
        let mut adj: Vec<Option<Var<'t>>> = vec![None; n];
        adj[y.idx] = Some(self.constant(1.0));
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes.borrow()[i].op;
            let out = Var { tape: self, idx: i };
            let mut acc = |j: usize, d: Var<'t>| {
                adj[j] = Some(match adj[j] {
                    Some(prev) => prev + d,
                    None => d,
                });
            };
            let at = |j: usize| Var { tape: self, idx: j };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(a, g);
                    acc(b, g);
                }
                Op::Sub(a, b) => {
                    acc(a, g);
                    acc(b, -g);
                }
                Op::Mul(a, b) => {
                    acc(a, g * at(b));
                    acc(b, g * at(a));
                }
                Op::Div(a, b) => {
                    let gb = g / at(b);
                    acc(a, gb);
                    acc(b, -(gb * out));
                }
                Op::Neg(a) => acc(a, -g),
                Op::AddConst(a) => acc(a, g),
                Op::MulConst(a, c) => acc(a, g * c),
                Op::Exp(a) => acc(a, g * out),
                Op::Ln(a) => acc(a, g / at(a)),
                Op::Sin(a) => acc(a, g * at(a).cos()),
                Op::Cos(a) => acc(a, -(g * at(a).sin())),
                Op::Tanh(a) => acc(a, g * (1.0 - out * out)),
                Op::Sigmoid(a) => acc(a, g * (out * (1.0 - out))),
                Op::Softplus(a) => acc(a, g * at(a).sigmoid()),
                Op::Sqrt(a) => acc(a, g * 0.5 / out),
            }
        }
        wrt.iter()
            .map(|v| {
                if v.idx < n {
                    adj[v.idx].unwrap_or_else(|| self.constant(0.0))
                } else {
                    self.constant(0.0)
                }
            })
            .collect()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value
    }

    fn unary(self, op: Op, value: f64) -> Var<'t> {
        self.tape.push(op, value)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.idx), self.value().exp())
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.idx), self.value().ln())
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.idx), self.value().sin())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.idx), self.value().cos())
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.idx), self.value().tanh())
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.idx), sigmoid(self.value()))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.idx), softplus(self.value()))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.idx), self.value().sqrt())
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sum of a non-empty slice of variables; zero constant needs a tape.
pub fn sum<'t>(tape: &'t Tape, xs: &[Var<'t>]) -> Var<'t> {
    xs.iter()
        .copied()
        .reduce(|a, b| a + b)
        .unwrap_or_else(|| tape.constant(0.0))
}

pub fn dot<'t>(tape: &'t Tape, a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
    let terms: Vec<_> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    sum(tape, &terms)
}

macro_rules! binary {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let f: fn(f64, f64) -> f64 = $f;
                let v = f(self.value(), rhs.value());
                self.tape.push(Op::$variant(self.idx, rhs.idx), v)
            }
        }
    };
}

binary!(Add, add, Add, |a, b| a + b);
binary!(Sub, sub, Sub, |a, b| a - b);
binary!(Mul, mul, Mul, |a, b| a * b);
binary!(Div, div, Div, |a, b| a / b);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.idx), -self.value())
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.idx), self.value() + rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self + (-rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(Op::MulConst(self.idx, rhs), self.value() * rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self * (1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        -rhs + self
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_and_second_derivatives() {
        let tape = Tape::new();
        let x = tape.var(0.7);
        let y = x.sin() * x.exp() + x.softplus() / x;
        let dy = tape.grad(y, &[x])[0];
        let d2y = tape.grad(dy, &[x])[0];
        let f = |x: f64| x.sin() * x.exp() + softplus(x) / x;
        let h = 1e-5;
        let fd1 = (f(0.7 + h) - f(0.7 - h)) / (2.0 * h);
        let fd2 = (f(0.7 + h) - 2.0 * f(0.7) + f(0.7 - h)) / (h * h);
        assert!((dy.value() - fd1).abs() < 1e-8);
        assert!((d2y.value() - fd2).abs() < 1e-4);
    }

    #[test]
    fn unused_input_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let z = tape.var(2.0);
        let y = x.tanh();
        let g = tape.grad(y, &[x, z]);
        assert_eq!(g[1].value(), 0.0);
    }

    #[test]
    fn fault_flag_on_nan() {
        let tape = Tape::new();
        let x = tape.var(-1.0);
        let _ = x.ln();
        assert!(tape.faulted());
    }

    #[test]
    fn stable_softplus_and_sigmoid() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
