//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Graph`] records every operation in execution order. Inputs always
//! precede outputs, so the tape is acyclic by construction and a backward
//! pass is a single sweep in reverse append order.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written gradient, for fused kernels such as the
/// CRF likelihood whose gradient comes from a dynamic program.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Gradient of the loss with respect to each input, given the gradient
    /// with respect to the output. `None` means "no contribution".
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSumExp(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    RowSelect {
        input: Var,
        indices: Vec<usize>,
        frozen_row: Option<usize>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    Sum(Var),
    Scale(Var, f64),
    Dropout {
        input: Var,
        mask: Tensor,
        keep: f64,
    },
    Reshape(Var),
    PairwiseSum(Var, Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(usize, Var)>,
    training: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(true)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    /// `training = false` turns dropout into the identity.
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers trainable parameter number `index`, sharing its storage.
    pub fn param(&mut self, index: usize, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((index, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), tb.data(), &mut out);
        let out = Tensor::matrix(m, n, out)?;
        self.push_checked("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum. `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = ta.clone();
        if ta.shape() == tb.shape() {
            out.add_assign(tb);
        } else if tb.rows() == 1 && tb.cols() == ta.cols() && tb.shape().len() == 2 {
            let cols = ta.cols();
            for row in out.data_mut().chunks_mut(cols) {
                for (x, y) in row.iter_mut().zip(tb.data()) {
                    *x += y;
                }
            }
        } else {
            return Err(dim_err("add", ta, tb));
        }
        self.push_checked("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push_checked("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push_checked("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        self.push_checked("softmax", out, Op::Softmax(a), &[a])
    }

    /// Row-wise log-sum-exp: `n x k -> n x 1`.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows()).map(|r| log_sum_exp(t.row(r))).collect();
        let out = Tensor::matrix(t.rows(), 1, out)?;
        self.push_checked("log_sum_exp", out, Op::LogSumExp(a), &[a])
    }

    /// Concatenation along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.value(v),
            None => return Err(Error::contract("concat of zero tensors")),
        };
        let out = match axis {
            0 => {
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &v in inputs {
                    let t = self.value(v);
                    if t.cols() != cols {
                        return Err(dim_err("concat", first, t));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, cols, data)?
            }
            1 => {
                let rows = first.rows();
                let mut cols = 0;
                for &v in inputs {
                    let t = self.value(v);
                    if t.rows() != rows {
                        return Err(dim_err("concat", first, t));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &v in inputs {
                        data.extend_from_slice(self.value(v).row(r));
                    }
                }
                Tensor::matrix(rows, cols, data)?
            }
            _ => return Err(Error::contract(format!("concat axis {axis} out of range"))),
        };
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push_checked("concat", out, op, inputs)
    }

    /// Gathers rows by index (repeats allowed).
    pub fn row_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.row_select_frozen(a, indices, None)
    }

    /// Row gather whose gradient skips `frozen_row` (used for padding rows).
    pub fn row_select_frozen(
        &mut self,
        a: Var,
        indices: &[usize],
        frozen_row: Option<usize>,
    ) -> Result<Var> {
        let t = self.value(a);
        if indices.is_empty() {
            return Err(Error::contract("row_select with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(indices.len(), cols, data)?;
        let op = Op::RowSelect {
            input: a,
            indices: indices.to_vec(),
            frozen_row,
        };
        self.push_checked("row_select", out, op, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start >= end || end > t.cols() {
            return Err(Error::contract(format!(
                "column slice {start}..{end} invalid for {} columns",
                t.cols()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = Tensor::matrix(t.rows(), end - start, data)?;
        self.push_checked("slice_cols", out, Op::SliceCols { input: a, start }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_checked("sum", out, Op::Sum(a), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push_checked("scale", out, Op::Scale(a, s), &[a])
    }

    /// Inverted dropout: `x * mask / keep` while training, identity otherwise.
    pub fn dropout(&mut self, a: Var, mask: Tensor, keep: f64) -> Result<Var> {
        if !self.training {
            return Ok(a);
        }
        let t = self.value(a);
        if mask.shape() != t.shape() {
            return Err(dim_err("dropout", t, &mask));
        }
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::contract(format!("keep probability {keep} not in (0, 1]")));
        }
        let data = t
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, m)| x * m / keep)
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let op = Op::Dropout {
            input: a,
            mask,
            keep,
        };
        self.push_checked("dropout", out, op, &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshaped(vec![rows, cols])?;
        self.push_checked("reshape", out, Op::Reshape(a), &[a])
    }

    /// For `a: n x k` and `b: m x k`, row `i * m + j` of the result is
    /// `a[i] + b[j]`.
    pub fn pairwise_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(dim_err("pairwise_sum", ta, tb));
        }
        let (n, m, k) = (ta.rows(), tb.rows(), ta.cols());
        let mut data = Vec::with_capacity(n * m * k);
        for i in 0..n {
            let ra = ta.row(i);
            for j in 0..m {
                data.extend(ra.iter().zip(tb.row(j)).map(|(x, y)| x + y));
            }
        }
        let out = Tensor::matrix(n * m, k, data)?;
        self.push_checked("pairwise_sum", out, Op::PairwiseSum(a, b), &[a, b])
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        let name = op.name();
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            op,
        };
        self.push_checked(name, out, op, inputs)
    }

    /// Back-propagates from a scalar `loss`, visiting every node once in
    /// reverse append order. Gradients from multiple consumers are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !gout.is_finite() {
                return Err(Error::Numeric { op: "backward" });
            }
            self.propagate(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    gemm_strided(m, n, k, gout.data(), (n as isize, 1), tb.data(), (1, n as isize), &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.requires_grad(*b) {
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * n];
                    gemm_strided(k, m, n, ta.data(), (1, k as isize), gout.data(), (n as isize, 1), &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                if self.requires_grad(*b) {
                    let tb = self.value(*b);
                    if tb.shape() == gout.shape() {
                        self.accumulate(grads, *b, gout.clone());
                    } else {
                        let mut db = vec![0.0; tb.cols()];
                        for row in gout.data().chunks(tb.cols()) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = gout.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                }
                if self.requires_grad(*b) {
                    let d = gout.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d)?);
                }
            }
            Op::Tanh(a) => {
                let d = gout.data().iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Sigmoid(a) => {
                let d = gout.data().iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut d = vec![0.0; out.numel()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(out.data().chunks(cols)).zip(gout.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((dx, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *dx = y * (g - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::LogSumExp(a) => {
                let ta = self.value(*a);
                let cols = ta.cols();
                let mut d = vec![0.0; ta.numel()];
                for r in 0..ta.rows() {
                    let lse = out.data()[r];
                    let g = gout.data()[r];
                    for c in 0..cols {
                        d[r * cols + c] = g * (ta.get(r, c) - lse).exp();
                    }
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &v in inputs {
                    let t = self.value(v);
                    let piece = if *axis == 0 {
                        let n = t.numel();
                        let p = gout.data()[offset..offset + n].to_vec();
                        offset += n;
                        p
                    } else {
                        let c = t.cols();
                        let mut p = Vec::with_capacity(t.numel());
                        for r in 0..t.rows() {
                            p.extend_from_slice(&gout.row(r)[offset..offset + c]);
                        }
                        offset += c;
                        p
                    };
                    if self.requires_grad(v) {
                        self.accumulate(grads, v, Tensor::new(t.shape().to_vec(), piece)?);
                    }
                }
            }
            Op::RowSelect {
                input,
                indices,
                frozen_row,
            } => {
                if self.requires_grad(*input) {
                    let t = self.value(*input);
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    for (k, &row) in indices.iter().enumerate() {
                        if Some(row) == *frozen_row {
                            continue;
                        }
                        for (x, g) in d.row_mut(row).iter_mut().zip(gout.row(k)) {
                            *x += g;
                        }
                    }
                    self.accumulate(grads, *input, d);
                }
            }
            Op::SliceCols { input, start } => {
                let t = self.value(*input);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                let w = gout.cols();
                for r in 0..t.rows() {
                    d.row_mut(r)[*start..*start + w].copy_from_slice(gout.row(r));
                }
                self.accumulate(grads, *input, d);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                let d = Tensor::new(t.shape().to_vec(), vec![gout.item(); t.numel()])?;
                self.accumulate(grads, *a, d);
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, gout.map(|g| g * s));
            }
            Op::Dropout { input, mask, keep } => {
                let d = gout.data().iter().zip(mask.data()).map(|(g, m)| g * m / keep).collect();
                self.accumulate(grads, *input, Tensor::new(gout.shape().to_vec(), d)?);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, gout.clone().reshaped(shape)?);
            }
            Op::PairwiseSum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m, k) = (ta.rows(), tb.rows(), ta.cols());
                let mut da = Tensor::zeros(n, k);
                let mut db = Tensor::zeros(m, k);
                for i in 0..n {
                    for j in 0..m {
                        let g = gout.row(i * m + j);
                        for (x, y) in da.row_mut(i).iter_mut().zip(g) {
                            *x += y;
                        }
                        for (x, y) in db.row_mut(j).iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let ds = op.backward(&values, out, gout)?;
                if ds.len() != inputs.len() {
                    return Err(Error::contract(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        ds.len(),
                        inputs.len()
                    )));
                }
                for (&v, d) in inputs.iter().zip(ds) {
                    if let Some(d) = d {
                        if d.shape() != self.value(v).shape() {
                            return Err(dim_err(op.name(), self.value(v), &d));
                        }
                        self.accumulate(grads, v, d);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffers produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients per registered parameter index, summed over every leaf
    /// that shares the index. Unused parameters are `None`.
    pub fn param_grads(&self, num_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..num_params).map(|_| None).collect();
        for &(idx, v) in &self.params {
            if let Some(g) = self.get(v) {
                match &mut out[idx] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

/// Numerically stable `ln(sum(exp(xs)))`; `-inf` for an empty or all
/// `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn sigmoid_of_zero() {
        let mut g = Graph::default();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn log_sum_exp_closed_form() {
        let mut g = Graph::default();
        let x = g.constant(Tensor::row_vector(vec![1f64.ln(), 3f64.ln()]));
        let y = g.log_sum_exp(x).unwrap();
        assert!(close(g.value(y).item(), 4f64.ln()));
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::default();
        let a = g.constant(Tensor::full(2, 3, 1.0));
        let b = g.constant(Tensor::full(3, 2, 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &Tensor::full(2, 2, 3.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::default();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        match g.matmul(a, b) {
            Err(Error::Dimension { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::default();
        let a = g.constant(Tensor::scalar(1e308));
        match g.scale(a, 10.0) {
            Err(Error::Numeric { op }) => assert_eq!(op, "scale"),
            _ => panic!("expected numeric error"),
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::default();
        let x = g.input(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 4.0, 5.0, 6.0]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::full(2, 3, 1.0));
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut g = Graph::default();
        let x = g.input(Tensor::scalar(0.0));
        let y = g.tanh(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::default();
        let x = g.input(Tensor::zeros(2, 2));
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(x * x) has gradient 2x; computed through two uses of x.
        let mut g = Graph::default();
        let x = g.input(Tensor::row_vector(vec![1.5, -2.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn dropout_is_identity_at_inference() {
        let mut g = Graph::new(false);
        let x = g.input(Tensor::row_vector(vec![1.0, 2.0]));
        let y = g.dropout(x, Tensor::row_vector(vec![0.0, 1.0]), 0.6).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_scales_by_keep_probability() {
        let mut g = Graph::new(true);
        let x = g.input(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let y = g.dropout(x, Tensor::row_vector(vec![1.0, 0.0, 1.0]), 0.5).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 0.0, 6.0]);
    }

    #[test]
    fn broadcast_add_sums_bias_gradient_over_rows() {
        let mut g = Graph::default();
        let x = g.input(Tensor::zeros(3, 2));
        let b = g.input(Tensor::row_vector(vec![1.0, 2.0]));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.value(s).item(), 9.0);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn row_select_frozen_row_gets_no_gradient() {
        let mut g = Graph::default();
        let table = g.input(Tensor::full(3, 2, 0.5));
        let rows = g.row_select_frozen(table, &[0, 2, 2], Some(0)).unwrap();
        let s = g.sum(rows).unwrap();
        let grads = g.backward(s).unwrap();
        let d = grads.get(table).unwrap();
        assert_eq!(d.row(0), &[0.0, 0.0]);
        assert_eq!(d.row(1), &[0.0, 0.0]);
        assert_eq!(d.row(2), &[2.0, 2.0]);
    }
}
