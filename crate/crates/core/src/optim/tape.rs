//! Scalar reverse-mode automatic differentiation.
//!
//! Every node stores its value and the local partial derivatives with respect
//! to its parents. Nodes are appended in evaluation order, so a single reverse
//! sweep accumulates all adjoints.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Default)]
struct Nodes {
    values: Vec<f64>,
    /// `edges[start[i]..start[i + 1]]` are the parents of node `i`.
    start: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Nodes>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        let t = Self::default();
        t.nodes.borrow_mut().start.push(0);
        t
    }

    /// Forget all nodes, keeping allocations.
    pub fn clear(&self) {
        let mut n = self.nodes.borrow_mut();
        n.values.clear();
        n.parents.clear();
        n.partials.clear();
        n.start.clear();
        n.start.push(0);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Independent input (or constant) node.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, std::iter::empty())
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, value: f64, edges: impl IntoIterator<Item = (u32, f64)>) -> Var<'_> {
        let mut n = self.nodes.borrow_mut();
        for (p, d) in edges {
            n.parents.push(p);
            n.partials.push(d);
        }
        let end = n.parents.len() as u32;
        n.start.push(end);
        n.values.push(value);
        Var {
            tape: self,
            idx: (n.values.len() - 1) as u32,
        }
    }

    /// Node with explicitly supplied value and partials `(parent, d value / d parent)`.
    pub fn custom<'t>(&'t self, value: f64, edges: &[(Var<'t>, f64)]) -> Var<'t> {
        self.push(value, edges.iter().map(|(v, d)| (v.idx, *d)))
    }

    /// `constant + sum_i c_i x_i` as a single node.
    pub fn linear_combination<'t>(&'t self, terms: &[(Var<'t>, f64)], constant: f64) -> Var<'t> {
        let value = constant + terms.iter().map(|(v, c)| c * v.value()).sum::<f64>();
        self.custom(value, terms)
    }

    /// `sum_i a_i b_i` as a single node.
    pub fn dot<'t>(&'t self, a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
        let (value, edges) = {
            let n = self.nodes.borrow();
            let v = |x: &Var<'t>| n.values[x.idx as usize];
            let value = a.iter().zip(b).map(|(x, y)| v(x) * v(y)).sum();
            let edges: Vec<(u32, f64)> = a
                .iter()
                .zip(b)
                .flat_map(|(x, y)| [(x.idx, v(y)), (y.idx, v(x))])
                .collect();
            (value, edges)
        };
        self.push(value, edges)
    }

    pub fn sum<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        let value = xs.iter().map(|x| x.value()).sum();
        self.push(value, xs.iter().map(|x| (x.idx, 1.0)))
    }

    /// Adjoints `d output / d node` for every node on the tape.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        let n = self.nodes.borrow();
        let mut adj = vec![0.0; n.values.len()];
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = (n.start[i] as usize, n.start[i + 1] as usize);
            for k in s..e {
                adj[n.parents[k] as usize] += a * n.partials[k];
            }
        }
        adj
    }

    /// Gradient of `output` with respect to `inputs`.
    pub fn grad_wrt(&self, output: Var<'_>, inputs: &[Var<'_>]) -> Vec<f64> {
        let adj = self.gradient(output);
        inputs.iter().map(|v| adj[v.idx as usize]).collect()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.tape.nodes.borrow().values[self.idx as usize]
    }

    pub fn index(&self) -> usize {
        self.idx as usize
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: f64, d: f64) -> Var<'t> {
        self.tape.push(value, [(self.idx, d)])
    }

    pub fn constant(&self, value: f64) -> Var<'t> {
        self.tape.var(value)
    }

    pub fn sin(self) -> Var<'t> {
        let x = self.value();
        self.unary(x.sin(), x.cos())
    }

    pub fn cos(self) -> Var<'t> {
        let x = self.value();
        self.unary(x.cos(), -x.sin())
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value().exp();
        self.unary(e, e)
    }

    pub fn ln(self) -> Var<'t> {
        let x = self.value();
        self.unary(x.ln(), 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        let s = self.value().sqrt();
        self.unary(s, 0.5 / s)
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value().tanh();
        self.unary(t, 1.0 - t * t)
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        let x = self.value();
        self.unary(x.powi(n), n as f64 * x.powi(n - 1))
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        self.unary(x * x, 2.0 * x)
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        if x > 0.0 {
            self.unary(x, 1.0)
        } else {
            self.unary(0.0, 0.0)
        }
    }

    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        self.unary(x.abs(), if x >= 0.0 { 1.0 } else { -1.0 })
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .push(self.value() + rhs.value(), [(self.idx, 1.0), (rhs.idx, 1.0)])
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .push(self.value() - rhs.value(), [(self.idx, 1.0), (rhs.idx, -1.0)])
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.tape.push(a * b, [(self.idx, b), (rhs.idx, a)])
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.tape
            .push(a / b, [(self.idx, 1.0 / b), (rhs.idx, -a / (b * b))])
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value(), -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value() + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.value() - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.value() * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary(self.value() / rhs, 1.0 / rhs)
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
        rhs.unary(self - rhs.value(), -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}
