//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every primitive applied through a [`Tape`] appends one node holding its
//! output value and the ids of its inputs. Node ids increase monotonically,
//! so walking the tape backwards from the loss visits nodes in reverse
//! topological order.
//!
//! ```
//! use lhc_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
//! let y = tape.tanh(w);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).data(), &[1.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulByScalar(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddRowBias(Var, Var),
    ScaleRows(Var, Var),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    AvgPoolSame(Var, usize),
    MaxPoolSame(Var, Vec<usize>),
    MaxPool2(Var, Vec<usize>),
    Conv2dSame(Var, Var, Var),
    GlobalAvgPool(Var),
    ToChannelMatrix(Var),
    FromChannelMatrix(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Stack(Vec<Var>),
    SoftmaxCrossEntropy(Var, Vec<usize>, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of primitive applications for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `∂loss/∂v`; zero when `v` did not contribute to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    /// Trainable input; gradients are tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Fixed input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.unary(a, value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.unary(a, value, Op::AddScalar(a))
    }

    /// `a · s` where `s` is a single-element node.
    pub fn mul_by_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let value = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[a, s]);
        Ok(self.push(value, Op::MulByScalar(a, s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.unary(a, value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.unary(a, value, Op::Reshape(a)))
    }

    /// `a[M,N] + b[N]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let [_, n] = self.value(a).dims2("add_row_bias")?;
        if self.shape(b) != [n] {
            return Err(Error::shape("add_row_bias", self.shape(a), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::AddRowBias(a, b), rg))
    }

    /// `a[M,N]` with row `i` multiplied by `r[i]`.
    pub fn scale_rows(&mut self, a: Var, r: Var) -> Result<Var> {
        let [m, n] = self.value(a).dims2("scale_rows")?;
        if self.shape(r) != [m] {
            return Err(Error::shape("scale_rows", self.shape(a), self.shape(r)));
        }
        let rv = self.value(r).data();
        let mut out = self.value(a).data().to_vec();
        for (row, s) in out.chunks_mut(n).zip(rv) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(&[a, r]);
        Ok(self.push(value, Op::ScaleRows(a, r), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.unary(a, value, Op::Mean(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = ops::sigmoid(self.value(a));
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = ops::tanh(self.value(a));
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = ops::relu(self.value(a));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = ops::softmax_rows(self.value(a));
        self.unary(a, value, Op::SoftmaxRows(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let value = ops::mean_rows(self.value(a))?;
        Ok(self.unary(a, value, Op::MeanRows(a)))
    }

    pub fn avg_pool2d_same(&mut self, a: Var, pool: usize) -> Result<Var> {
        let value = ops::avg_pool2d_same(self.value(a), pool)?;
        Ok(self.unary(a, value, Op::AvgPoolSame(a, pool)))
    }

    pub fn max_pool2d_same(&mut self, a: Var, pool: usize) -> Result<Var> {
        let (value, arg) = ops::max_pool2d_same_indexed(self.value(a), pool)?;
        Ok(self.unary(a, value, Op::MaxPoolSame(a, arg)))
    }

    /// 2×2 stride-2 max pooling.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let (value, arg) = ops::max_pool2_indexed(self.value(a))?;
        Ok(self.unary(a, value, Op::MaxPool2(a, arg)))
    }

    pub fn conv2d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let value = ops::conv2d_same(self.value(x), self.value(kernel), self.value(bias))?;
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(value, Op::Conv2dSame(x, kernel, bias), rg))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let value = ops::global_avg_pool(self.value(a))?;
        Ok(self.unary(a, value, Op::GlobalAvgPool(a)))
    }

    pub fn to_channel_matrix(&mut self, a: Var) -> Result<Var> {
        let value = ops::to_channel_matrix(self.value(a))?;
        Ok(self.unary(a, value, Op::ToChannelMatrix(a)))
    }

    pub fn from_channel_matrix(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let value = ops::from_channel_matrix(self.value(a), h, w)?;
        Ok(self.unary(a, value, Op::FromChannelMatrix(a)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = ops::slice_cols(self.value(a), start, len)?;
        Ok(self.unary(a, value, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = ops::concat_cols(&refs)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("stack"))?;
        let shape = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(first).len());
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::shape("stack", &shape, self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut out_shape = vec![parts.len()];
        out_shape.extend_from_slice(&shape);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Stack(parts.to_vec()),
            rg,
        ))
    }

    /// Mean over the batch of `−log softmax(logits)[label]` for `logits: [B,K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [b, k] = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape("softmax_cross_entropy", &[b, k], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label {
                label: bad,
                classes: k,
            });
        }
        let probs = ops::softmax_rows(self.value(logits));
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.unary(
            logits,
            value,
            Op::SoftmaxCrossEntropy(logits, labels.to_vec(), probs),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            let mut acc = |v: Var, contribution: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut before[v.0] {
                    Some(existing) => existing.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            };
            self.propagate(node, g, &mut acc)?;
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, acc: &mut impl FnMut(Var, Tensor)) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y)?);
                }
                if self.needs(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MulByScalar(a, s) => {
                let sv = val(*s).item()?;
                if self.needs(*a) {
                    acc(*a, g.map(|v| v * sv));
                }
                if self.needs(*s) {
                    let dot: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    acc(*s, Tensor::from_parts(val(*s).shape().to_vec(), vec![dot]));
                }
            }
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    acc(*a, ops::matmul_nt(g, val(*b))?);
                }
                if self.needs(*b) {
                    acc(*b, ops::matmul_tn(val(*a), g)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()?),
            Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape().to_vec())?),
            Op::AddRowBias(a, b) => {
                acc(*a, g.clone());
                if self.needs(*b) {
                    let n = val(*b).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*b, Tensor::from_parts(vec![n], db));
                }
            }
            Op::ScaleRows(a, r) => {
                let n = g.shape()[1];
                if self.needs(*a) {
                    let mut da = g.data().to_vec();
                    for (row, s) in da.chunks_mut(n).zip(val(*r).data()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    acc(*a, Tensor::from_parts(g.shape().to_vec(), da));
                }
                if self.needs(*r) {
                    let dr = g
                        .data()
                        .chunks(n)
                        .zip(val(*a).data().chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*r, Tensor::from_parts(val(*r).shape().to_vec(), dr));
                }
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                acc(*a, Tensor::full(val(*a).shape().to_vec(), gv));
            }
            Op::Mean(a) => {
                let t = val(*a);
                let gv = g.item()? / t.len() as f64;
                acc(*a, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * y)?),
            Op::SoftmaxRows(a) => acc(*a, ops::softmax_rows_backward(&node.value, g)),
            Op::MeanRows(a) => {
                let [m, n] = val(*a).dims2("mean_rows")?;
                let mut da = Vec::with_capacity(m * n);
                for gv in g.data() {
                    da.extend(std::iter::repeat_n(gv / n as f64, n));
                }
                acc(*a, Tensor::from_parts(vec![m, n], da));
            }
            Op::AvgPoolSame(a, p) => acc(*a, ops::avg_pool2d_same_backward(g, *p)?),
            Op::MaxPoolSame(a, arg) | Op::MaxPool2(a, arg) => {
                acc(*a, ops::scatter_indexed(g, arg, val(*a).shape()))
            }
            Op::Conv2dSame(x, k, b) => {
                let (dx, dk, db) = ops::conv2d_same_backward(val(*x), val(*k), g)?;
                acc(*x, dx);
                acc(*k, dk);
                acc(*b, db);
            }
            Op::GlobalAvgPool(a) => {
                let [h, w, c] = val(*a).dims3("global_avg_pool")?;
                let hw = (h * w) as f64;
                let px: Vec<f64> = g.data().iter().map(|v| v / hw).collect();
                let mut da = Vec::with_capacity(h * w * c);
                for _ in 0..h * w {
                    da.extend_from_slice(&px);
                }
                acc(*a, Tensor::from_parts(vec![h, w, c], da));
            }
            Op::ToChannelMatrix(a) => {
                let [h, w, _] = val(*a).dims3("to_channel_matrix")?;
                acc(*a, ops::from_channel_matrix(g, h, w)?);
            }
            Op::FromChannelMatrix(a) => acc(*a, ops::to_channel_matrix(g)?),
            Op::SliceCols(a, start) => {
                let [rows, cols] = val(*a).dims2("slice_cols")?;
                let len = g.shape()[1];
                let mut da = vec![0.0; rows * cols];
                for (i, gr) in g.data().chunks(len).enumerate() {
                    da[i * cols + start..i * cols + start + len].copy_from_slice(gr);
                }
                acc(*a, Tensor::from_parts(vec![rows, cols], da));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[1];
                    if self.needs(p) {
                        acc(p, ops::slice_cols(g, offset, len)?);
                    }
                    offset += len;
                }
            }
            Op::Stack(parts) => {
                let chunk = g.len() / parts.len();
                for (&p, gd) in parts.iter().zip(g.data().chunks(chunk)) {
                    acc(p, Tensor::from_parts(val(p).shape().to_vec(), gd.to_vec()));
                }
            }
            Op::SoftmaxCrossEntropy(a, labels, probs) => {
                let gv = g.item()?;
                let k = probs.shape()[1];
                let b = labels.len() as f64;
                let mut da = probs.data().to_vec();
                for (row, &l) in da.chunks_mut(k).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gv / b);
                }
                acc(*a, Tensor::from_parts(probs.shape().to_vec(), da));
            }
        }
        Ok(())
    }
}
