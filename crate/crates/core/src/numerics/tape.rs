//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every primitive pushes one node holding its forward value and the
//! information its adjoint needs. Nodes are appended in evaluation order, so
//! walking the record backwards is a valid reverse topological order.

use std::cell::RefCell;

use super::kernels::{self, axis_split, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Pointwise functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
    /// `1/√x`.
    InvSqrt,
}

const LN_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    ScaleBy(usize, usize),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_shared: bool,
        b_shared: bool,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Reshape(usize),
    Act(usize, Activation),
    Softmax {
        a: usize,
        cols: usize,
    },
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Expand {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Gather {
        a: usize,
        rows: Vec<usize>,
        width: usize,
    },
    Ln(usize),
    StopGradient,
    StraightThrough {
        original: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when nothing reached it.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, v: Var<'_>) -> bool {
        self.grads[v.id].is_some()
    }

    /// Accumulates the gradient of `v` into `target.grad`.
    pub fn accumulate_into(&self, v: Var<'_>, target: &mut Tensor) {
        let g = self.grads[v.id].as_deref();
        let n = target.len();
        let buf = target.grad.get_or_insert_with(|| vec![0.0; n]);
        if let Some(g) = g {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records `t` as a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        if numel(shape) != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Runs every adjoint in reverse record order, seeded at the scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::dim("backward root", &nodes[root.id].shape, &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &gy, &mut grads);
            }
            grads[id] = Some(gy);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn propagate(nodes: &[Node], node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, gy.to_vec());
            accumulate(grads, nodes, *b, gy.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, gy.to_vec());
            accumulate(grads, nodes, *b, gy.iter().map(|g| -g).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, gy.iter().zip(vb).map(|(g, y)| g * y).collect());
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, gy.iter().zip(va).map(|(g, x)| g * x).collect());
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, gy.iter().zip(vb).map(|(g, d)| g / d).collect());
            }
            if nodes[*b].requires_grad {
                let gb = gy
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(g, (x, d))| -g * x / (d * d))
                    .collect();
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, gy.iter().map(|g| g * s).collect()),
        Op::Offset(a) | Op::Reshape(a) => accumulate(grads, nodes, *a, gy.to_vec()),
        Op::ScaleBy(x, s) => {
            let sv = nodes[*s].value[0];
            if nodes[*x].requires_grad {
                accumulate(grads, nodes, *x, gy.iter().map(|g| g * sv).collect());
            }
            if nodes[*s].requires_grad {
                let d: f64 = gy.iter().zip(&nodes[*x].value).map(|(g, v)| g * v).sum();
                accumulate(grads, nodes, *s, vec![d]);
            }
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            a_shared,
            b_shared,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let a_off = |i: usize| if *a_shared { 0 } else { i * m * k };
            let b_off = |i: usize| if *b_shared { 0 } else { i * k * n };
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; va.len()];
                for i in 0..*batch {
                    let gyb = &gy[i * m * n..(i + 1) * m * n];
                    let bb = &vb[b_off(i)..b_off(i) + k * n];
                    let o = a_off(i);
                    gemm_nt(gyb, bb, &mut ga[o..o + m * k], m, n, k);
                }
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; vb.len()];
                for i in 0..*batch {
                    let gyb = &gy[i * m * n..(i + 1) * m * n];
                    let ab = &va[a_off(i)..a_off(i) + m * k];
                    let o = b_off(i);
                    gemm_tn(ab, gyb, &mut gb[o..o + k * n], k, m, n);
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Permute { a, perm } => {
            let inv = kernels::inverse_perm(perm);
            let (g, _) = kernels::permute(gy, &node.shape, &inv);
            accumulate(grads, nodes, *a, g);
        }
        Op::Act(a, kind) => {
            let x = &nodes[*a].value;
            let g = match kind {
                Activation::Relu => gy.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
                Activation::Gelu => gy.iter().zip(x).map(|(g, &v)| g * gelu_grad(v)).collect(),
                Activation::Sigmoid => gy.iter().zip(&node.value).map(|(g, s)| g * s * (1.0 - s)).collect(),
                Activation::InvSqrt => gy.iter().zip(&node.value).map(|(g, y)| -0.5 * g * y * y * y).collect(),
            };
            accumulate(grads, nodes, *a, g);
        }
        Op::Softmax { a, cols } => {
            let y = &node.value;
            let mut g = vec![0.0; y.len()];
            for ((gr, yr), gyr) in g.chunks_mut(*cols).zip(y.chunks(*cols)).zip(gy.chunks(*cols)) {
                let dot: f64 = yr.iter().zip(gyr).map(|(a, b)| a * b).sum();
                for ((o, yv), gv) in gr.iter_mut().zip(yr).zip(gyr) {
                    *o = yv * (gv - dot);
                }
            }
            accumulate(grads, nodes, *a, g);
        }
        Op::SumAxis { a, outer, len, inner } => {
            let mut g = vec![0.0; outer * len * inner];
            for o in 0..*outer {
                for l in 0..*len {
                    let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.copy_from_slice(&gy[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, nodes, *a, g);
        }
        Op::Expand { a, outer, len, inner } => {
            let mut g = vec![0.0; outer * inner];
            for o in 0..*outer {
                for l in 0..*len {
                    let src = &gy[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, s) in g[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            accumulate(grads, nodes, *a, g);
        }
        Op::Gather { a, rows, width } => {
            let mut g = vec![0.0; nodes[*a].value.len()];
            for (out_row, &r) in rows.iter().enumerate() {
                let src = &gy[out_row * width..(out_row + 1) * width];
                for (d, s) in g[r * width..(r + 1) * width].iter_mut().zip(src) {
                    *d += s;
                }
            }
            accumulate(grads, nodes, *a, g);
        }
        Op::Ln(a) => {
            let x = &nodes[*a].value;
            let g = gy
                .iter()
                .zip(x)
                .map(|(g, &v)| if v > LN_CLAMP { g / v } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::StraightThrough { original } => accumulate(grads, nodes, *original, gy.to_vec()),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    /// Borrows the forward value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.with_value(|v| v[0])
    }

    fn unary(self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(shape, value, rg, op)
    }

    fn binary_elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape != b.shape {
            return Err(Error::dim(name, &a.shape, &b.shape));
        }
        let value = a.value.iter().zip(&b.value).map(|(x, y)| f(*x, *y)).collect();
        let shape = a.shape.clone();
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.tape.push(shape, value, rg, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let value = self.with_value(|v| v.iter().map(|x| x * s).collect());
        self.unary(self.shape(), value, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.with_value(|v| v.iter().map(|x| x + c).collect());
        self.unary(self.shape(), value, Op::Offset(self.id))
    }

    /// Multiplies every element by the one-element tensor `s`.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.with_value(|v| if v.len() == 1 { Some(v[0]) } else { None });
        let sv = sv.ok_or_else(|| Error::dim("scale_by", &s.shape(), &[1]))?;
        let value = self.with_value(|v| v.iter().map(|x| x * sv).collect());
        let rg = self.requires_grad() || s.requires_grad();
        Ok(self.tape.push(self.shape(), value, rg, Op::ScaleBy(self.id, s.id)))
    }

    /// Matrix product over the last two axes.
    ///
    /// Accepts `[m,k]·[k,n]`, `[B,m,k]·[B,k,n]`, and either operand without
    /// its batch axis, which is then shared across the batch.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let err = || Error::dim("matmul", &a.shape, &b.shape);
        let (a_batch, m, k) = match a.shape.as_slice() {
            [m, k] => (None, *m, *k),
            [bt, m, k] => (Some(*bt), *m, *k),
            _ => return Err(err()),
        };
        let (b_batch, k2, n) = match b.shape.as_slice() {
            [k, n] => (None, *k, *n),
            [bt, k, n] => (Some(*bt), *k, *n),
            _ => return Err(err()),
        };
        if k != k2 {
            return Err(err());
        }
        let batch = match (a_batch, b_batch) {
            (Some(x), Some(y)) if x != y => return Err(err()),
            (Some(x), _) | (None, Some(x)) => Some(x),
            (None, None) => None,
        };
        let nb = batch.unwrap_or(1);
        let (a_shared, b_shared) = (a_batch.is_none(), b_batch.is_none());
        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            let ao = if a_shared { 0 } else { i * m * k };
            let bo = if b_shared { 0 } else { i * k * n };
            gemm_nn(
                &a.value[ao..ao + m * k],
                &b.value[bo..bo + k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = match batch {
            Some(bt) => vec![bt, m, n],
            None => vec![m, n],
        };
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            out,
            rg,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch: nb,
                m,
                k,
                n,
                a_shared,
                b_shared,
            },
        ))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim("permute", &shape, perm));
        }
        let (value, out_shape) = self.with_value(|v| kernels::permute(v, &shape, perm));
        Ok(self.unary(
            out_shape,
            value,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::dim("transpose", &self.shape(), &[2]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let cur = self.shape();
        if numel(&cur) != numel(shape) {
            return Err(Error::dim("reshape", &cur, shape));
        }
        let value = self.with_value(<[f64]>::to_vec);
        Ok(self.unary(shape.to_vec(), value, Op::Reshape(self.id)))
    }

    pub fn activate(self, kind: Activation) -> Var<'t> {
        let value = self.with_value(|v| v.iter().map(|&x| activate_scalar(kind, x)).collect());
        self.unary(self.shape(), value, Op::Act(self.id, kind))
    }

    pub fn relu(self) -> Var<'t> {
        self.activate(Activation::Relu)
    }

    pub fn gelu(self) -> Var<'t> {
        self.activate(Activation::Gelu)
    }

    pub fn inv_sqrt(self) -> Var<'t> {
        self.activate(Activation::InvSqrt)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.activate(Activation::Sigmoid)
    }

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax_rows(self) -> Var<'t> {
        let shape = self.shape();
        let cols = *shape.last().unwrap_or(&1);
        let value = self.with_value(|v| {
            let mut out = v.to_vec();
            for row in out.chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x /= total;
                }
            }
            out
        });
        self.unary(shape, value, Op::Softmax { a: self.id, cols })
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let value = self.with_value(|v| {
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            out
        });
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.unary(
            out_shape,
            value,
            Op::SumAxis {
                a: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", &self.shape(), &[axis]))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let n = numel(&self.shape());
        self.reshape(&[n])?.sum_axis(0)
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = numel(&self.shape());
        Ok(self.sum_all()?.scale(1.0 / n as f64))
    }

    /// Inserts a new axis of extent `len` at `axis`, repeating the values.
    pub fn expand(self, axis: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis > shape.len() {
            return Err(Error::dim("expand", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let value = self.with_value(|v| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    out.extend_from_slice(&v[o * inner..(o + 1) * inner]);
                }
            }
            out
        });
        let mut out_shape = shape;
        out_shape.insert(axis, len);
        Ok(self.unary(
            out_shape,
            value,
            Op::Expand {
                a: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Selects rows of the 2-D view `[rows, last_axis]`.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let width = *shape.last().unwrap_or(&1);
        let total = numel(&shape) / width.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::Argument(format!("row {bad} out of range {total}")));
        }
        let value = self.with_value(|v| {
            let mut out = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                out.extend_from_slice(&v[r * width..(r + 1) * width]);
            }
            out
        });
        Ok(self.unary(
            vec![rows.len(), width],
            value,
            Op::Gather {
                a: self.id,
                rows: rows.to_vec(),
                width,
            },
        ))
    }

    /// Natural log with inputs clamped below at 1e-12.
    pub fn ln_clamped(self) -> Var<'t> {
        let value = self.with_value(|v| v.iter().map(|&x| x.max(LN_CLAMP).ln()).collect());
        self.unary(self.shape(), value, Op::Ln(self.id))
    }

    /// Forward identity whose adjoint is zero.
    pub fn stop_gradient(self) -> Var<'t> {
        let value = self.with_value(<[f64]>::to_vec);
        self.tape.push(self.shape(), value, false, Op::StopGradient)
    }

    /// Emits `self` (the quantized value) forward and routes the whole
    /// incoming adjoint to `original`.
    pub fn straight_through(self, original: Var<'t>) -> Result<Var<'t>> {
        let (qs, os) = (self.shape(), original.shape());
        if qs != os {
            return Err(Error::dim("straight_through", &qs, &os));
        }
        let value = self.with_value(<[f64]>::to_vec);
        let rg = original.requires_grad();
        Ok(self
            .tape
            .push(qs, value, rg, Op::StraightThrough { original: original.id }))
    }
}

pub fn activate_scalar(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        Activation::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        Activation::InvSqrt => 1.0 / x.sqrt(),
    }
}
