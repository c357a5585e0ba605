//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; parents always precede
//! their children, so a single reverse sweep from the loss visits each node
//! once. The tape is rebuilt for every training step.
//!
//! ```
//! use leaf_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.var(Tensor::row_vector(&[1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use crate::error::{LeafError, Result};
use crate::tensor::Tensor;

/// Value written into entries that [`Tape::topk_mask`] discards. Softmax's
/// max shift turns it into an exact zero without producing NaN.
pub const MASKED: f64 = f64::MIN;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    ScalarMul(Var, f64),
    AddScalar(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Softplus(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    TopkMask(Var, Vec<bool>),
    MaskedLogSumExp(Var, Vec<bool>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations for one forward/backward pass.
///
/// Not `Sync`-shared: one tape belongs to one thread of execution.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get), but returns zeros of the right shape for an
    /// unreachable variable.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn broadcast_kind(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b == (1, 1) {
        Ok(Broadcast::Scalar)
    } else if b == (1, a.1) {
        Ok(Broadcast::Row)
    } else if b == (a.0, 1) {
        Ok(Broadcast::Col)
    } else {
        Err(LeafError::Shape {
            op,
            left: a,
            right: b,
        })
    }
}

fn broadcast_index(kind: Broadcast, r: usize, c: usize, cols: usize) -> usize {
    match kind {
        Broadcast::Same => r * cols + c,
        Broadcast::Row => c,
        Broadcast::Col => r,
        Broadcast::Scalar => 0,
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = a.shape();
    let bd = b.data();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for (c, &av) in a.row(r).iter().enumerate() {
            out.push(f(av, bd[broadcast_index(kind, r, c, cols)]));
        }
    }
    Tensor::new(rows, cols, out).expect("shape preserved")
}

/// Sums a full-shape gradient down to the shape of a broadcast operand.
fn reduce_broadcast(g: &Tensor, kind: Broadcast, b_shape: (usize, usize)) -> Tensor {
    if kind == Broadcast::Same {
        return g.clone();
    }
    let (rows, cols) = g.shape();
    let mut out = Tensor::zeros(b_shape.0, b_shape.1);
    let od = out.data_mut();
    for r in 0..rows {
        for (c, &gv) in g.row(r).iter().enumerate() {
            od[broadcast_index(kind, r, c, cols)] += gv;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    /// Leaf that requires gradients.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(LeafError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(LeafError::Shape {
                op: "matmul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = av.matmul_raw(bv);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise `a + b`; `b` may be a row vector, column vector or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind("add", self.shape(a), self.shape(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), kind, |x, y| x + y);
        self.push("add", out, Op::Add(a, b, kind), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind("sub", self.shape(a), self.shape(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), kind, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b, kind), &[a, b])
    }

    /// Elementwise (Hadamard) product with the same broadcasting as [`add`](Self::add).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind("mul", self.shape(a), self.shape(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), kind, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b, kind), &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scalar_mul", out, Op::ScalarMul(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scalar_mul(a, -1.0)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(LeafError::contract("mean_all of empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Per-row sum, producing a `rows x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let data = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let out = Tensor::new(v.rows(), 1, data)?;
        self.push("sum_rows", out, Op::SumRows(a), &[a])
    }

    /// Row-wise softmax with max shift.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rows() == 0 || v.cols() == 0 {
            return Err(LeafError::contract("softmax_rows of empty tensor"));
        }
        let mut out = v.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push("softmax_rows", out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rows() == 0 || v.cols() == 0 {
            return Err(LeafError::contract("log_softmax_rows of empty tensor"));
        }
        let mut out = v.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push("log_softmax_rows", out, Op::LogSoftmax(a), &[a])
    }

    /// `log(1 + e^x)`, evaluated as `max(x, 0) + log(1 + e^-|x|)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus_scalar);
        self.push("softplus", out, Op::Softplus(a), &[a])
    }

    /// Same function as [`softplus`](Self::softplus); used where it plays the
    /// role of a smoothed hinge.
    pub fn log1p_exp(&mut self, a: Var) -> Result<Var> {
        self.softplus(a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if let Some(bad) = v.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(LeafError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = v.map(f64::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| LeafError::contract("concat_cols of zero tensors"))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(LeafError::Shape {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start >= end || end > cols {
            return Err(LeafError::param(format!(
                "slice_cols range {start}..{end} invalid for {cols} columns"
            )));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let out = Tensor::new(rows, end - start, data)?;
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    /// Keeps the `k` largest entries of each row (lower column index first on
    /// ties) and replaces the rest with [`MASKED`].
    pub fn topk_mask(&mut self, a: Var, k: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if k == 0 || k > cols {
            return Err(LeafError::param(format!(
                "top-k of {k} out of range 1..={cols}"
            )));
        }
        let v = self.value(a);
        let mut keep = vec![false; rows * cols];
        let mut out = v.clone();
        for r in 0..rows {
            for j in topk_indices(v.row(r), k) {
                keep[r * cols + j] = true;
            }
            for (j, x) in out.row_mut(r).iter_mut().enumerate() {
                if !keep[r * cols + j] {
                    *x = MASKED;
                }
            }
        }
        self.push("topk_mask", out, Op::TopkMask(a, keep), &[a])
    }

    /// Row-wise `log Σ_{j: mask} e^{x_j}` over the selected entries, giving a
    /// `rows x 1` column. Every row must select at least one entry.
    pub fn masked_log_sum_exp(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if mask.len() != rows * cols {
            return Err(LeafError::Shape {
                op: "masked_log_sum_exp",
                left: (rows, cols),
                right: (mask.len(), 1),
            });
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let m = &mask[r * cols..(r + 1) * cols];
            let selected: Vec<f64> = v
                .row(r)
                .iter()
                .zip(m)
                .filter_map(|(&x, &keep)| keep.then_some(x))
                .collect();
            if selected.is_empty() {
                return Err(LeafError::contract(format!(
                    "masked_log_sum_exp: row {r} selects no entries"
                )));
            }
            data.push(log_sum_exp(&selected));
        }
        let out = Tensor::new(rows, 1, data)?;
        self.push(
            "masked_log_sum_exp",
            out,
            Op::MaskedLogSumExp(a, mask.to_vec()),
            &[a],
        )
    }

    /// Reverse sweep from a scalar `loss`. May be called once per tape
    /// lifetime; call [`reset`](Self::reset) before reusing the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(LeafError::contract(
                "backward already ran on this tape; reset it first",
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(LeafError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contrib: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_raw(&bv.transpose()));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, av.transpose().matmul_raw(g));
                }
            }
            Op::Add(a, b, kind) => {
                self.accumulate(grads, *a, g.clone());
                let gb = reduce_broadcast(g, *kind, self.shape(*b));
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b, kind) => {
                self.accumulate(grads, *a, g.clone());
                let gb = reduce_broadcast(&g.map(|x| -x), *kind, self.shape(*b));
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b, kind) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    let ga = zip_broadcast(g, bv, *kind, |gv, y| gv * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let full = zip_elementwise(g, av, |gv, x| gv * x);
                    self.accumulate(grads, *b, reduce_broadcast(&full, *kind, bv.shape()));
                }
            }
            Op::ScalarMul(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::MeanAll(a) => {
                let (r, c) = self.shape(*a);
                let scale = g.data()[0] / (r * c) as f64;
                self.accumulate(grads, *a, Tensor::filled(r, c, scale));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    ga.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let mut ga = g.clone();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let dot: f64 = g.row(r).iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    for (gx, &yv) in ga.row_mut(r).iter_mut().zip(y) {
                        *gx = yv * (*gx - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..out.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (gx, &ly) in ga.row_mut(r).iter_mut().zip(out.row(r)) {
                        *gx -= ly.exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = zip_elementwise(g, self.value(*a), |gv, x| gv * sigmoid(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = zip_elementwise(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = zip_elementwise(g, out, |gv, y| gv * y);
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = zip_elementwise(g, self.value(*a), |gv, x| gv / x);
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.requires_grad(p) {
                        let mut gp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let width = g.cols();
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    ga.row_mut(r)[*start..*start + width].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::TopkMask(a, keep) => {
                let mut ga = g.clone();
                for (x, &k) in ga.data_mut().iter_mut().zip(keep) {
                    if !k {
                        *x = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MaskedLogSumExp(a, mask) => {
                let av = self.value(*a);
                let (rows, cols) = av.shape();
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let lse = out.data()[r];
                    let gr = g.data()[r];
                    for (j, (gx, &x)) in ga.row_mut(r).iter_mut().zip(av.row(r)).enumerate() {
                        if mask[r * cols + j] {
                            *gx = gr * (x - lse).exp();
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

fn zip_elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of one row, in place, with max shift.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Indices of the `k` largest values; ties go to the lower index.
pub(crate) fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}
