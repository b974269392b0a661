//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its forward value; `backward`
//! walks the nodes once in reverse execution order and accumulates adjoints
//! into every node that requires a gradient.
//!
//! Broadcasting in binary ops is limited to the right-hand operand and comes
//! in two forms only: a single-element tensor over any tensor, and a row
//! vector (`[n]` or `[1, n]`) over the rows of an `[m, n]` matrix. Anything
//! else must go through an explicit op such as [`Tape::expand_cols`].

use std::fmt;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    /// Natural log; non-positive inputs are a domain error, clamp first.
    Log,
    Sigmoid,
    Tanh,
    Softplus,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row(usize),
}

/// Calls `f(i, j)` for every flat index `i` of the left operand, with `j`
/// the matching index into the broadcast right operand.
#[inline(always)]
fn each_broadcast(len: usize, bc: Broadcast, mut f: impl FnMut(usize, usize)) {
    match bc {
        Broadcast::Same => (0..len).for_each(|i| f(i, i)),
        Broadcast::Scalar => (0..len).for_each(|i| f(i, 0)),
        Broadcast::Row(n) => {
            for base in (0..len).step_by(n) {
                (0..n).for_each(|j| f(base + j, j));
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

/// Hand-written adjoint for a fused operation whose forward value the caller
/// computes itself.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Result<Vec<Vec<f64>>>;
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Binary(BinaryOp, Var, Var, Broadcast),
    Unary(UnaryOp, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Scale(Var, f64),
    AddScalar(Var, f64),
    Reduce {
        kind: Reduce,
        x: Var,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    Softmax { x: Var, cols: usize },
    ExpandCols { x: Var, n: usize },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Leaf => write!(f, "Leaf"),
            Op::Matmul(a, b) => write!(f, "Matmul({a:?}, {b:?})"),
            Op::Binary(op, a, b, _) => write!(f, "{op:?}({a:?}, {b:?})"),
            Op::Unary(op, x) => write!(f, "{op:?}({x:?})"),
            Op::Clamp { x, lo, hi } => write!(f, "Clamp({x:?}, {lo}, {hi})"),
            Op::Scale(x, c) => write!(f, "Scale({x:?}, {c})"),
            Op::AddScalar(x, c) => write!(f, "AddScalar({x:?}, {c})"),
            Op::Reduce { kind, x, .. } => write!(f, "{kind:?}({x:?})"),
            Op::Softmax { x, .. } => write!(f, "Softmax({x:?})"),
            Op::ExpandCols { x, n } => write!(f, "ExpandCols({x:?}, {n})"),
            Op::Reshape(x) => write!(f, "Reshape({x:?})"),
            Op::SliceCols { x, start } => write!(f, "SliceCols({x:?}, {start})"),
            Op::Custom { inputs, op } => write!(f, "{}({inputs:?})", op.name()),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated adjoint of `v`; `None` until `backward` reaches it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Moves the adjoint of `v` out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }

    /// Clears all adjoints so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    // ── Linear algebra ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::Matmul(a, b)))
    }

    // ── Elementwise ───────────────────────────────────────────────────

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let bc = broadcast_kind(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let x = av.data();
        let mut out = vec![0.0; x.len()];
        match op {
            BinaryOp::Add => each_broadcast(x.len(), bc, |i, j| out[i] = x[i] + bv[j]),
            BinaryOp::Sub => each_broadcast(x.len(), bc, |i, j| out[i] = x[i] - bv[j]),
            BinaryOp::Mul => each_broadcast(x.len(), bc, |i, j| out[i] = x[i] * bv[j]),
            BinaryOp::Div => each_broadcast(x.len(), bc, |i, j| out[i] = x[i] / bv[j]),
        }
        let value = Tensor::new(av.shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Binary(op, a, b, bc)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if op == UnaryOp::Log {
            if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::domain("log", format!("log of non-positive value {bad}; clamp first")));
            }
        }
        let d = xv.data();
        let out: Vec<f64> = match op {
            UnaryOp::Neg => d.iter().map(|v| -v).collect(),
            UnaryOp::Exp => d.iter().map(|v| v.exp()).collect(),
            UnaryOp::Log => d.iter().map(|v| v.ln()).collect(),
            UnaryOp::Sigmoid => d.iter().map(|&v| sigmoid(v)).collect(),
            UnaryOp::Tanh => d.iter().map(|v| v.tanh()).collect(),
            UnaryOp::Softplus => d.iter().map(|&v| softplus(v)).collect(),
            UnaryOp::Abs => d.iter().map(|v| v.abs()).collect(),
            UnaryOp::Square => d.iter().map(|v| v * v).collect(),
        };
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Unary(op, x)))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    /// Clamps into `[lo, hi]`; the adjoint is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::invalid("clamp", format!("empty interval [{lo}, {hi}]")));
        }
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v.clamp(lo, hi)).collect())?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Clamp { x, lo, hi }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * c).collect())?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Scale(x, c)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v + c).collect())?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::AddScalar(x, c)))
    }

    // ── Reductions ────────────────────────────────────────────────────

    /// Sum or mean over `axis`, or over everything when `axis` is `None`.
    pub fn reduce(&mut self, kind: Reduce, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner, out_shape) = match axis {
            None => (1, shape.iter().product(), 1, Vec::new()),
            Some(ax) if ax < shape.len() => {
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                (
                    shape[..ax].iter().product(),
                    shape[ax],
                    shape[ax + 1..].iter().product(),
                    out_shape,
                )
            }
            Some(ax) => {
                return Err(Error::invalid(
                    "reduce",
                    format!("axis {ax} out of range for rank {}", shape.len()),
                ))
            }
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[base + i];
                }
            }
        }
        if kind == Reduce::Mean {
            let n = extent as f64;
            out.iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            rg,
            Op::Reduce {
                kind,
                x,
                outer,
                extent,
                inner,
            },
        ))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Mean, x, axis)
    }

    /// Max-shifted softmax over the last axis of a vector or of each matrix row.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = match xv.shape() {
            [k] => *k,
            [_, k] => *k,
            s => return Err(Error::invalid("softmax", format!("expected rank 1 or 2, got {s:?}"))),
        };
        if let Some(bad) = xv.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::domain("softmax", format!("non-finite logit {bad}")));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Softmax { x, cols }))
    }

    // ── Shape plumbing ────────────────────────────────────────────────

    /// Repeats a length-`B` vector (or `[B, 1]` column) across `n` columns.
    pub fn expand_cols(&mut self, x: Var, n: usize) -> Result<Var> {
        let rows = match self.shape(x) {
            [b] | [b, 1] => *b,
            s => return Err(Error::invalid("expand_cols", format!("expected [B] or [B, 1], got {s:?}"))),
        };
        let xv = self.value(x).data();
        let out: Vec<f64> = xv.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let value = Tensor::new(&[rows, n], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::ExpandCols { x, n }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start >= end || end > cols {
            return Err(Error::invalid(
                "slice_cols",
                format!("range {start}..{end} invalid for {cols} columns"),
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let value = Tensor::new(&[rows, end - start], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::SliceCols { x, start }))
    }

    /// Records a fused op whose forward `output` was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    // ── Reverse pass ──────────────────────────────────────────────────

    /// Populates adjoints of every node that requires a gradient and
    /// contributes to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without zero_grad".to_string(),
            ));
        }
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g)?;
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        let mut contributions: Vec<(Var, Vec<f64>)> = Vec::with_capacity(2);
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize), &mut da);
                    contributions.push((*a, da));
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), &mut db);
                    contributions.push((*b, db));
                }
            }
            Op::Binary(op, a, b, bc) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let blen = bv.len();
                let n = g.len();
                if self.rg(*a) {
                    let mut da = g.to_vec();
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => {}
                        BinaryOp::Mul => each_broadcast(n, *bc, |i, j| da[i] *= bv[j]),
                        BinaryOp::Div => each_broadcast(n, *bc, |i, j| da[i] /= bv[j]),
                    }
                    contributions.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; blen];
                    match op {
                        BinaryOp::Add => each_broadcast(n, *bc, |i, j| db[j] += g[i]),
                        BinaryOp::Sub => each_broadcast(n, *bc, |i, j| db[j] -= g[i]),
                        BinaryOp::Mul => each_broadcast(n, *bc, |i, j| db[j] += g[i] * av[i]),
                        BinaryOp::Div => each_broadcast(n, *bc, |i, j| db[j] -= g[i] * av[i] / (bv[j] * bv[j])),
                    }
                    contributions.push((*b, db));
                }
            }
            Op::Unary(op, x) => {
                let xv = self.nodes[x.0].value.data();
                let yv = node.value.data();
                let dx: Vec<f64> = match op {
                    UnaryOp::Neg => g.iter().map(|v| -v).collect(),
                    UnaryOp::Exp => g.iter().zip(yv).map(|(gj, y)| gj * y).collect(),
                    UnaryOp::Log => g.iter().zip(xv).map(|(gj, x)| gj / x).collect(),
                    UnaryOp::Sigmoid => g.iter().zip(yv).map(|(gj, y)| gj * y * (1.0 - y)).collect(),
                    UnaryOp::Tanh => g.iter().zip(yv).map(|(gj, y)| gj * (1.0 - y * y)).collect(),
                    UnaryOp::Softplus => g.iter().zip(xv).map(|(gj, &x)| gj * sigmoid(x)).collect(),
                    UnaryOp::Abs => g.iter().zip(xv).map(|(gj, &x)| gj * sign(x)).collect(),
                    UnaryOp::Square => g.iter().zip(xv).map(|(gj, x)| 2.0 * gj * x).collect(),
                };
                contributions.push((*x, dx));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.nodes[x.0].value.data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gj, &v)| if v >= *lo && v <= *hi { gj } else { 0.0 })
                    .collect();
                contributions.push((*x, dx));
            }
            Op::Scale(x, c) => contributions.push((*x, g.iter().map(|v| v * c).collect())),
            Op::AddScalar(x, _) | Op::Reshape(x) => contributions.push((*x, g.to_vec())),
            Op::Reduce {
                kind,
                x,
                outer,
                extent,
                inner,
            } => {
                let scale = match kind {
                    Reduce::Sum => 1.0,
                    Reduce::Mean => 1.0 / *extent as f64,
                };
                let mut dx = vec![0.0; outer * extent * inner];
                for o in 0..*outer {
                    for e in 0..*extent {
                        let base = (o * extent + e) * inner;
                        for j in 0..*inner {
                            dx[base + j] = g[o * inner + j] * scale;
                        }
                    }
                }
                contributions.push((*x, dx));
            }
            Op::Softmax { x, cols } => {
                let yv = node.value.data();
                let mut dx = vec![0.0; yv.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(*cols).zip(yv.chunks(*cols)).zip(g.chunks(*cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), gj) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (gj - dot);
                    }
                }
                contributions.push((*x, dx));
            }
            Op::ExpandCols { x, n } => {
                let dx = g.chunks(*n).map(|r| r.iter().sum()).collect();
                contributions.push((*x, dx));
            }
            Op::SliceCols { x, start } => {
                // accumulate in place; a K-way split of a wide head would
                // otherwise allocate K full-width buffers
                if self.nodes[x.0].requires_grad {
                    let (rows, cols) = self.nodes[x.0].value.dims2()?;
                    let width = node.value.dims2()?.1;
                    let dx = self.grads[x.0].get_or_insert_with(|| vec![0.0; rows * cols]);
                    for (r, gr) in g.chunks_exact(width).enumerate() {
                        let dst = &mut dx[r * cols + start..r * cols + start + width];
                        dst.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let grads = op.backward(&vals, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (v, gv) in inputs.iter().zip(grads) {
                    if gv.len() != self.nodes[v.0].value.len() {
                        return Err(Error::Contract(format!("custom op {} gradient has wrong length", op.name())));
                    }
                    contributions.push((*v, gv));
                }
            }
        }
        for (v, c) in contributions {
            self.accumulate(v, c);
        }
        Ok(())
    }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if b.iter().product::<usize>() == 1 {
        return Ok(Broadcast::Scalar);
    }
    match (a, b) {
        ([_, n], [k]) | ([_, n], [1, k]) if n == k => Ok(Broadcast::Row(*n)),
        _ => Err(Error::shape(op, a, b)),
    }
}

/// Row-major `C = A · B` through `matrixmultiply`; strides are given per
/// operand as `(row_stride, col_stride)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above guarantee every strided access stays in
    // bounds for the row-major and transposed layouts used in this module.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
