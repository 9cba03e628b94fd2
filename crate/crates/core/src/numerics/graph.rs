//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes; every operation pushes a new
//! node whose parents already exist, so node order is a topological order and
//! the backward sweep simply walks the tape in reverse. Binary elementwise ops
//! broadcast rank-≤2 operands numpy-style (a dimension of 1 stretches).

use std::cell::RefCell;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use super::tensor::{dims2, matmul_into, Tensor};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: Axis },
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    GatherRows { input: Var, indices: Vec<usize> },
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize { input: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: Axis },
    Extremum { input: Var, argidx: Vec<usize> },
    Standardize { input: Var, axis: Axis, inv_std: Vec<f64> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Concat { .. } => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Square(..) => "square",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Extremum { .. } => "extremum",
            Op::Standardize { .. } => "standardize",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Single-threaded computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar root with respect to every node of the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of its shape when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Broadcast layout of a binary elementwise op.
struct Broadcast {
    shape: Vec<usize>,
    rows: usize,
    cols: usize,
    a: (usize, usize),
    b: (usize, usize),
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let (ra, ca) = dims2(a);
        let (rb, cb) = dims2(b);
        let fit = |x: usize, y: usize| -> Option<usize> {
            match (x, y) {
                _ if x == y => Some(x),
                (1, _) => Some(y),
                (_, 1) => Some(x),
                _ => None,
            }
        };
        let (rows, cols) = match (fit(ra, rb), fit(ca, cb)) {
            (Some(r), Some(c)) => (r, c),
            _ => return Err(Error::shape(op, a, b)),
        };
        let shape = match a.len().max(b.len()) {
            0 => vec![],
            1 => vec![cols],
            _ => vec![rows, cols],
        };
        Ok(Self {
            shape,
            rows,
            cols,
            a: (ra, ca),
            b: (rb, cb),
        })
    }

    #[inline]
    fn index(dims: (usize, usize), i: usize, j: usize) -> usize {
        let r = if dims.0 == 1 { 0 } else { i };
        let c = if dims.1 == 1 { 0 } else { j };
        r * dims.1 + c
    }

    fn apply(&self, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ad, bd) = (a.data(), b.data());
        let mut out = Vec::with_capacity(self.rows * self.cols);
        if self.a == self.b {
            out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..self.rows {
                for j in 0..self.cols {
                    out.push(f(ad[Self::index(self.a, i, j)], bd[Self::index(self.b, i, j)]));
                }
            }
        }
        Tensor::new(self.shape.clone(), out).expect("broadcast shape")
    }

    /// Sum `g(i, j)` over the broadcast output into a tensor of `shape`.
    fn reduce(&self, dims: (usize, usize), shape: &[usize], g: impl Fn(usize, usize) -> f64) -> Tensor {
        let mut out = Tensor::zeros(shape);
        let data = out.data_mut();
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[Self::index(dims, i, j)] += g(i, j);
            }
        }
        out
    }
}

fn axis_groups(shape: &[usize], axis: Axis) -> (usize, usize) {
    // (number of groups, group length)
    let (r, c) = dims2(shape);
    match axis {
        Axis::Rows => (c, r),
        Axis::Cols => (r, c),
    }
}

#[inline]
fn axis_index(shape: &[usize], axis: Axis, group: usize, k: usize) -> usize {
    let c = dims2(shape).1;
    match axis {
        Axis::Rows => k * c + group,
        Axis::Cols => group * c + k,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&self, value: Arc<Tensor>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Register an input tensor.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Register an input tensor without copying it.
    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Leaf)
    }

    /// Alias of [`Graph::leaf`] for inputs whose gradient is not needed.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    /// Name of the operation that produced `v`.
    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op.tag()
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, make: fn(Var, Var) -> Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let bc = Broadcast::new(op, va.shape(), vb.shape())?;
        let out = bc.apply(&va, &vb, f);
        Ok(self.push(out, make(a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&self, a: Var, offset: f64) -> Var {
        let out = self.value(a).map(|x| x + offset);
        self.push(out, Op::Offset(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().is_empty() || vb.shape().len() != 2 {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k) = dims2(va.shape());
        let (k2, n) = dims2(vb.shape());
        if k != k2 {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn concat(&self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let values: Vec<Arc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let (r0, c0) = dims2(values[0].shape());
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for v in &values {
                    let (r, c) = dims2(v.shape());
                    if c != c0 {
                        return Err(Error::shape("concat", values[0].shape(), v.shape()));
                    }
                    rows += r;
                    data.extend_from_slice(v.data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for v in &values {
                    let (r, c) = dims2(v.shape());
                    if r != r0 {
                        return Err(Error::shape("concat", values[0].shape(), v.shape()));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for v in &values {
                        data.extend_from_slice(v.row(i));
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Rows `[start, end)` as a matrix.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = dims2(va.shape());
        if start > end || end > r {
            return Err(Error::shape("slice_rows", va.shape(), &[start, end]));
        }
        let data = va.data()[start * c..end * c].to_vec();
        Ok(self.push(Tensor::matrix(end - start, c, data)?, Op::SliceRows { input: a, start }))
    }

    /// Columns `[start, end)` as a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = dims2(va.shape());
        if start > end || end > c {
            return Err(Error::shape("slice_cols", va.shape(), &[start, end]));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&va.row(i)[start..end]);
        }
        Ok(self.push(Tensor::matrix(r, end - start, data)?, Op::SliceCols { input: a, start }))
    }

    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = dims2(va.shape());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::shape("gather_rows", va.shape(), &[i]));
            }
            data.extend_from_slice(va.row(i));
        }
        Ok(self.push(
            Tensor::matrix(indices.len(), c, data)?,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
        ))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, make: fn(Var) -> Op) -> Var {
        let out = self.value(a).map(f);
        self.push(out, make(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log)
    }

    /// Row-wise softmax.
    pub fn softmax(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = (*va).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = (*va).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Scale every row to unit ℓ2 norm (norms are floored at `1e-12`).
    pub fn l2_normalize(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = (*va).clone();
        let c = out.cols().max(1);
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { input: a, norms })
    }

    /// Pairwise cosine similarities between the rows of `a` (`m×d`) and `b` (`n×d`), giving `m×n`.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if dims2(&sa).1 != dims2(&sb).1 {
            return Err(Error::shape("cosine_similarity", &sa, &sb));
        }
        let na = self.l2_normalize(a);
        let nb = self.l2_normalize(b);
        let na = if sa.len() < 2 { self.reshape_row(na)? } else { na };
        let nbt = self.transpose(nb);
        self.matmul(na, nbt)
    }

    fn reshape_row(&self, a: Var) -> Result<Var> {
        // rank-1 rows as 1×d matrices; reuses concat's bookkeeping
        self.concat(&[a], Axis::Rows)
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.sum() / va.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sum along `axis`, dropping it.
    pub fn sum_axis(&self, a: Var, axis: Axis) -> Var {
        let va = self.value(a);
        let (groups, len) = axis_groups(va.shape(), axis);
        let out: Vec<f64> = (0..groups)
            .map(|g| (0..len).map(|k| va.data()[axis_index(va.shape(), axis, g, k)]).sum())
            .collect();
        self.push(Tensor::vector(out), Op::SumAxis { input: a, axis })
    }

    pub fn mean_axis(&self, a: Var, axis: Axis) -> Var {
        let len = axis_groups(&self.shape(a), axis).1;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / len as f64)
    }

    fn extremum(&self, a: Var, axis: Axis, better: fn(f64, f64) -> bool) -> Var {
        let va = self.value(a);
        let (groups, len) = axis_groups(va.shape(), axis);
        let mut out = Vec::with_capacity(groups);
        let mut argidx = Vec::with_capacity(groups);
        for g in 0..groups {
            let mut best = axis_index(va.shape(), axis, g, 0);
            for k in 1..len {
                let idx = axis_index(va.shape(), axis, g, k);
                if better(va.data()[idx], va.data()[best]) {
                    best = idx;
                }
            }
            out.push(va.data()[best]);
            argidx.push(best);
        }
        self.push(Tensor::vector(out), Op::Extremum { input: a, argidx })
    }

    /// Minimum along `axis`; the gradient flows to the first minimiser.
    pub fn min_over_axis(&self, a: Var, axis: Axis) -> Var {
        self.extremum(a, axis, |x, best| x < best)
    }

    /// Maximum along `axis`; the gradient flows to the first maximiser.
    pub fn max_over_axis(&self, a: Var, axis: Axis) -> Var {
        self.extremum(a, axis, |x, best| x > best)
    }

    /// Zero-mean, unit-variance normalisation along `axis` (biased variance).
    pub fn standardize(&self, a: Var, axis: Axis, eps: f64) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let (groups, len) = axis_groups(&shape, axis);
        let mut out = vec![0.0; va.len()];
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let idx = |k| axis_index(&shape, axis, g, k);
            let mean = (0..len).map(|k| va.data()[idx(k)]).sum::<f64>() / len as f64;
            let var = (0..len).map(|k| (va.data()[idx(k)] - mean).powi(2)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for k in 0..len {
                out[idx(k)] = (va.data()[idx(k)] - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Standardize { input: a, axis, inv_std },
        )
    }

    /// Gradients of a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.shape(root);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::invalid(format!("backward from non-scalar root of shape {shape:?}")));
        }
        self.backward_seeded(root, Tensor::filled(&shape, 1.0))
    }

    /// Vector-Jacobian product: propagate `seed` (shaped like `root`) back through the tape.
    pub fn backward_seeded(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.shape() != seed.shape() {
            return Err(Error::shape("backward_seeded", nodes[root.0].value.shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_scaled(&g, 1.0).expect("gradient shape"),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let y = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
                    let bc = Broadcast::new("add", &sa, &sb)?;
                    let gd = g.data();
                    let c = bc.cols;
                    acc(&mut grads, *a, bc.reduce(bc.a, &sa, |r, k| gd[r * c + k]));
                    acc(&mut grads, *b, bc.reduce(bc.b, &sb, |r, k| sign * gd[r * c + k]));
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let bc = Broadcast::new("mul", va.shape(), vb.shape())?;
                    let (gd, ad, bd) = (g.data(), va.data(), vb.data());
                    let c = bc.cols;
                    let at = |r, k| ad[Broadcast::index(bc.a, r, k)];
                    let bt = |r, k| bd[Broadcast::index(bc.b, r, k)];
                    if matches!(node.op, Op::Mul(..)) {
                        acc(&mut grads, *a, bc.reduce(bc.a, va.shape(), |r, k| gd[r * c + k] * bt(r, k)));
                        acc(&mut grads, *b, bc.reduce(bc.b, vb.shape(), |r, k| gd[r * c + k] * at(r, k)));
                    } else {
                        acc(&mut grads, *a, bc.reduce(bc.a, va.shape(), |r, k| gd[r * c + k] / bt(r, k)));
                        acc(
                            &mut grads,
                            *b,
                            bc.reduce(bc.b, vb.shape(), |r, k| -gd[r * c + k] * at(r, k) / (bt(r, k) * bt(r, k))),
                        );
                    }
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g.map(|x| x * f)),
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k) = dims2(va.shape());
                    let n = dims2(vb.shape()).1;
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    let bt = vb.transpose();
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut ga, m, n, k);
                    let at = va.transpose();
                    let mut gb = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut gb, k, m, n);
                    acc(&mut grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                    acc(&mut grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
                Op::Transpose(a) => {
                    let ga = g.transpose().reshaped(val(*a).shape())?;
                    acc(&mut grads, *a, ga);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let ps = val(p).shape().to_vec();
                        let (r, c) = dims2(&ps);
                        let mut gp = Vec::with_capacity(r * c);
                        match axis {
                            Axis::Rows => {
                                gp.extend_from_slice(&g.data()[offset * c..(offset + r) * c]);
                                offset += r;
                            }
                            Axis::Cols => {
                                for row in 0..r {
                                    gp.extend_from_slice(&g.row(row)[offset..offset + c]);
                                }
                                offset += c;
                            }
                        }
                        acc(&mut grads, p, Tensor::new(ps, gp)?);
                    }
                }
                Op::SliceRows { input, start } => {
                    let s = val(*input).shape().to_vec();
                    let c = dims2(&s).1;
                    let mut ga = Tensor::zeros(&s);
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *input, ga);
                }
                Op::SliceCols { input, start } => {
                    let s = val(*input).shape().to_vec();
                    let mut ga = Tensor::zeros(&s);
                    let w = g.cols();
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::GatherRows { input, indices } => {
                    let s = val(*input).shape().to_vec();
                    let mut ga = Tensor::zeros(&s);
                    for (k, &r) in indices.iter().enumerate() {
                        for (dst, src) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                            *dst += src;
                        }
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::Tanh(a) => acc(&mut grads, *a, zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv))),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv))),
                Op::Exp(a) => acc(&mut grads, *a, zip_map(&g, y, |gv, yv| gv * yv)),
                Op::Gelu(a) => acc(&mut grads, *a, zip_map(&g, val(*a), |gv, x| gv * gelu_grad(x))),
                Op::Square(a) => acc(&mut grads, *a, zip_map(&g, val(*a), |gv, x| 2.0 * gv * x)),
                Op::Log(a) => acc(&mut grads, *a, zip_map(&g, val(*a), |gv, x| gv / x)),
                Op::Softmax(a) => {
                    let mut ga = g.clone();
                    let c = y.cols().max(1);
                    for (r, row) in ga.data_mut().chunks_mut(c).enumerate() {
                        let yr = y.row(r);
                        let inner: f64 = row.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                        for (gv, yv) in row.iter_mut().zip(yr) {
                            *gv = yv * (*gv - inner);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let mut ga = g.clone();
                    let c = y.cols().max(1);
                    for (r, row) in ga.data_mut().chunks_mut(c).enumerate() {
                        let total: f64 = row.iter().sum();
                        for (gv, yv) in row.iter_mut().zip(y.row(r)) {
                            *gv -= yv.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::L2Normalize { input, norms } => {
                    let mut ga = g.clone();
                    let c = y.cols().max(1);
                    for (r, row) in ga.data_mut().chunks_mut(c).enumerate() {
                        let yr = y.row(r);
                        let n = norms[r];
                        if n <= NORM_EPS {
                            row.iter_mut().for_each(|gv| *gv /= NORM_EPS);
                            continue;
                        }
                        let inner: f64 = row.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                        for (gv, yv) in row.iter_mut().zip(yr) {
                            *gv = (*gv - yv * inner) / n;
                        }
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    acc(&mut grads, *a, Tensor::filled(val(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let s = val(*a).shape().to_vec();
                    let n: usize = s.iter().product();
                    acc(&mut grads, *a, Tensor::filled(&s, g.item() / n as f64));
                }
                Op::SumAxis { input, axis } => {
                    let s = val(*input).shape().to_vec();
                    let (groups, len) = axis_groups(&s, *axis);
                    let mut ga = Tensor::zeros(&s);
                    for grp in 0..groups {
                        for k in 0..len {
                            ga.data_mut()[axis_index(&s, *axis, grp, k)] = g.data()[grp];
                        }
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::Extremum { input, argidx, .. } => {
                    let mut ga = Tensor::zeros(val(*input).shape());
                    for (grp, &idx) in argidx.iter().enumerate() {
                        ga.data_mut()[idx] += g.data()[grp];
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::Standardize { input, axis, inv_std } => {
                    let s = val(*input).shape().to_vec();
                    let (groups, len) = axis_groups(&s, *axis);
                    let mut ga = Tensor::zeros(&s);
                    for (grp, inv) in inv_std.iter().enumerate().take(groups) {
                        let idx = |k| axis_index(&s, *axis, grp, k);
                        let mean_g = (0..len).map(|k| g.data()[idx(k)]).sum::<f64>() / len as f64;
                        let mean_gy =
                            (0..len).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum::<f64>() / len as f64;
                        for k in 0..len {
                            ga.data_mut()[idx(k)] = inv * (g.data()[idx(k)] - mean_g - y.data()[idx(k)] * mean_gy);
                        }
                    }
                    acc(&mut grads, *input, ga);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}
