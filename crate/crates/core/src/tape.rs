//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an arena of nodes appended in evaluation order, so the node
//! list is already a topological order and [`Tape::backward`] is a single
//! reverse sweep. Handles ([`Var`]) are plain indices into the arena.
//!
//! ```
//! use replaykd::tape::Tape;
//! use replaykd::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! Elementwise binary ops accept either equal shapes or a right operand whose
//! shape equals the left operand's shape minus its leading (batch) axis.
//! Reductions run sequentially in ascending index order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Offset inside `log` so that `log(0)` stays finite.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax(Var),
    Sum(Var),
    SumAxis(Var, usize),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Rows,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if !a.shape().is_empty() && &a.shape()[1..] == b.shape() {
        Ok(Broadcast::Rows)
    } else {
        Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// `(outer, axis, inner)` extents for reducing `shape` along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g [m×n] · bᵀ` where `b` is `[k×n]`.
fn matmul_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `[m×k]` and `g` is `[m×n]`.
fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn softmax_rows(x: &Tensor) -> Vec<f64> {
    let w = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(w) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= total;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was
    /// reachable from the loss and participates in differentiation.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name.into()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mode = broadcast(name, ta, tb)?;
        let data = match mode {
            Broadcast::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Rows => {
                let w = tb.numel();
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data()[i % w]))
                    .collect()
            }
        };
        Ok((ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", shape, data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", shape, data, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", shape, data, Op::Mul(a, b), &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&v| f(v)).collect();
        self.push(name, shape, data, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, s), |v| v * s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |v| v + s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    /// `ln(x + LOG_EPS)`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), |v| (v + LOG_EPS).ln())
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), f64::abs)
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let data = softmax_rows(t);
        self.push("softmax", shape, data, Op::Softmax(a), &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push("sum", Vec::new(), vec![total], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.shape().len() {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("sum_axis: no axis {axis}"),
            });
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += t.data()[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        self.push("sum_axis", shape, data, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let len = t.shape().get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len)
    }

    /// Stacks along the leading (batch) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let joined = Tensor::concat_rows(&tensors)?;
        let shape = joined.shape().to_vec();
        let data = joined.data().to_vec();
        self.push("concat_rows", shape, data, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Populates gradients of `loss` with respect to every node that requires
    /// them. A tape can be differentiated once; call [`Tape::reset`] before
    /// recording the next step.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape; reset it first".into()));
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            let contributions = self.local_grads(node, &g);
            for (var, dg) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&dg) {
                            *a += d;
                        }
                    }
                    slot => *slot = Some(dg),
                }
            }
            grads[idx] = Some(g);
        }

        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        if self.grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite("backward".into()));
        }
        Ok(())
    }

    fn reduce_rows(&self, b: Var, g: Vec<f64>) -> Vec<f64> {
        let w = self.value(b).numel();
        if g.len() == w {
            return g;
        }
        let mut out = vec![0.0; w];
        for (i, v) in g.iter().enumerate() {
            out[i % w] += v;
        }
        out
    }

    fn expand_rows(&self, a: Var, b: Var) -> Vec<f64> {
        let ta = self.value(a);
        let tb = self.value(b);
        let w = tb.numel();
        (0..ta.numel()).map(|i| tb.data()[i % w]).collect()
    }

    /// Vector-Jacobian products of `node` for upstream gradient `g`.
    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let out = node.value.data();
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            let x = self.value(a).data();
            let d = g.iter().zip(x).zip(out).map(|((&g, &x), &y)| f(g, x, y)).collect();
            vec![(a, d)]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut v = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    v.push((*a, matmul_bt(g, tb.data(), m, k, n)));
                }
                if self.nodes[b.0].requires_grad {
                    v.push((*b, matmul_at(ta.data(), g, m, k, n)));
                }
                v
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, self.reduce_rows(*b, g.to_vec()))],
            Op::Sub(a, b) => {
                let neg = g.iter().map(|v| -v).collect();
                vec![(*a, g.to_vec()), (*b, self.reduce_rows(*b, neg))]
            }
            Op::Mul(a, b) => {
                let xa = self.value(*a).data();
                let xb = self.expand_rows(*a, *b);
                let da = g.iter().zip(&xb).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(xa).map(|(g, x)| g * x).collect();
                vec![(*a, da), (*b, self.reduce_rows(*b, db))]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => elementwise(*a, &|g, x, _| if x > 0.0 { g } else { 0.0 }),
            Op::Tanh(a) => elementwise(*a, &|g, _, y| g * (1.0 - y * y)),
            Op::Sigmoid(a) => elementwise(*a, &|g, _, y| g * y * (1.0 - y)),
            Op::Exp(a) => elementwise(*a, &|g, _, y| g * y),
            Op::Log(a) => elementwise(*a, &|g, x, _| g / (x + LOG_EPS)),
            Op::Abs(a) => elementwise(*a, &|g, x, _| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }),
            Op::Softmax(a) => {
                let w = *node.value.shape().last().unwrap_or(&1);
                let mut d = Vec::with_capacity(out.len());
                for (yr, gr) in out.chunks(w).zip(g.chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(self.value(*a).shape(), *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).numel();
                        let slice = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, slice)
                    })
                    .collect()
            }
        }
    }
}
