//! Reverse-mode differentiation on a Wengert tape.
//!
//! A [`Tape`] is an append-only list of nodes. Building a graph only records
//! operations and checks shapes; [`Tape::forward`] evaluates every node in
//! append order and [`Tape::backward`] walks them once in reverse. Leaf
//! values can be replaced between passes, which is how the finite-difference
//! harness in [`check`] perturbs parameters without rebuilding the graph.
//!
//! Values are `rows × cols` matrices of `f64`. There is no general
//! broadcasting: the only broadcast is [`Tape::add_row`], which adds a
//! `1 × cols` bias to every row.

pub mod check;
mod ssm_grad;

use ndarray::{s, Array2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops::{self, SsmWeights};
use crate::ssm::{Discretization, FftConvolver};

pub use ssm_grad::{grad_ssm_conv, grad_ssm_recurrent, SsmConvGrads};

pub type Tensor = Array2<f64>;
pub type Shape = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs of an SSM convolution node.
#[derive(Debug, Clone, Copy)]
pub struct SsmConvInputs {
    /// `L × H` input sequence.
    pub x: NodeId,
    pub a_re: NodeId,
    pub a_im: NodeId,
    pub c_re: NodeId,
    pub c_im: NodeId,
    pub d: NodeId,
    pub log_dt: NodeId,
    pub rule: Discretization,
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    /// `x · w` with `x: L × in`, `w: in × out`.
    MatMul(NodeId, NodeId),
    /// `x + b` with `b: 1 × cols` added to every row.
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    SliceCols(NodeId, usize, usize),
    /// Column-wise max over rows; ties go to the lowest row.
    MaxPool(NodeId),
    MeanPool(NodeId),
    Sum(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    SsmConv(SsmConvInputs),
    /// Mean over rows of `-log softmax(z_r)[label_r]`.
    SoftmaxLogLoss { logits: NodeId, labels: Vec<usize> },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matvec",
            Op::AddRow(..) => "add-row",
            Op::Add(..) => "add",
            Op::Mul(..) => "elementwise-mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::SliceCols(..) => "slice-cols",
            Op::MaxPool(_) => "max-pool-over-sequence",
            Op::MeanPool(_) => "mean-pool-over-sequence",
            Op::Sum(_) => "sum",
            Op::LayerNorm { .. } => "layernorm",
            Op::SsmConv(_) => "ssm-conv",
            Op::SoftmaxLogLoss { .. } => "softmax-log-loss",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    op: Op,
    shape: Shape,
    value: Tensor,
    grad: Tensor,
}

impl Node {
    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, left: Shape, right: Shape) -> Error {
    Error::ShapeMismatch { op, left, right }
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

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, shape: Shape) -> NodeId {
        self.nodes.push(Node {
            op,
            shape,
            value: Tensor::zeros((0, 0)),
            grad: Tensor::zeros((0, 0)),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let shape = value.dim();
        let id = self.push(Op::Leaf, shape);
        self.nodes[id.0].value = value;
        id
    }

    /// Replaces a leaf's value; shape must not change.
    pub fn set_value(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::ContractViolation(format!("node {} is not a leaf", id.0)));
        }
        if node.shape != value.dim() {
            return Err(mismatch("set_value", node.shape, value.dim()));
        }
        node.value = value;
        Ok(())
    }

    pub(crate) fn leaf_value_mut(&mut self, id: NodeId) -> &mut Tensor {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Leaf));
        &mut self.nodes[id.0].value
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.1 != ws.0 {
            return Err(mismatch("matvec", xs, ws));
        }
        Ok(self.push(Op::MatMul(x, w), (xs.0, ws.1)))
    }

    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs != (1, xs.1) {
            return Err(mismatch("add-row", xs, bs));
        }
        Ok(self.push(Op::AddRow(x, b), xs))
    }

    pub fn add(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if xs != ys {
            return Err(mismatch("add", xs, ys));
        }
        Ok(self.push(Op::Add(x, y), xs))
    }

    pub fn mul(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if xs != ys {
            return Err(mismatch("elementwise-mul", xs, ys));
        }
        Ok(self.push(Op::Mul(x, y), xs))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Scale(x, factor), s)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Sigmoid(x), s)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Exp(x), s)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Log(x), s)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if start >= end || end > s.1 {
            return Err(Error::ContractViolation(format!(
                "column range {start}..{end} invalid for shape {s:?}"
            )));
        }
        Ok(self.push(Op::SliceCols(x, start, end), (s.0, end - start)))
    }

    pub fn max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.0 == 0 {
            return Err(Error::EmptyBag);
        }
        Ok(self.push(Op::MaxPool(x), (1, s.1)))
    }

    pub fn mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.0 == 0 {
            return Err(Error::EmptyBag);
        }
        Ok(self.push(Op::MeanPool(x), (1, s.1)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), (1, 1))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, xs.1) {
                return Err(mismatch("layernorm", xs, self.shape(p)));
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, xs))
    }

    pub fn ssm_conv(&mut self, inputs: SsmConvInputs) -> Result<NodeId> {
        let xs = self.shape(inputs.x);
        let poles = self.shape(inputs.a_re);
        if poles.0 != xs.1 {
            return Err(mismatch("ssm-conv", xs, poles));
        }
        for p in [inputs.a_im, inputs.c_re, inputs.c_im] {
            if self.shape(p) != poles {
                return Err(mismatch("ssm-conv", poles, self.shape(p)));
            }
        }
        for p in [inputs.d, inputs.log_dt] {
            if self.shape(p) != (1, xs.1) {
                return Err(mismatch("ssm-conv", (1, xs.1), self.shape(p)));
            }
        }
        Ok(self.push(Op::SsmConv(inputs), xs))
    }

    pub fn softmax_log_loss(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let s = self.shape(logits);
        if labels.len() != s.0 {
            return Err(Error::ContractViolation(format!(
                "{} labels for {} rows of logits",
                labels.len(),
                s.0
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= s.1) {
            return Err(Error::ContractViolation(format!("label {bad} out of range for {} classes", s.1)));
        }
        if s.0 == 0 {
            return Err(Error::EmptyInput("softmax-log-loss over zero rows"));
        }
        Ok(self.push(Op::SoftmaxLogLoss { logits, labels }, (1, 1)))
    }

    fn ssm_weights(&self, inp: &SsmConvInputs) -> SsmWeights<'_> {
        SsmWeights {
            a_re: self.value(inp.a_re).view(),
            a_im: self.value(inp.a_im).view(),
            c_re: self.value(inp.c_re).view(),
            c_im: self.value(inp.c_im).view(),
            d: self.value(inp.d).view(),
            log_dt: self.value(inp.log_dt).view(),
        }
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |id: NodeId| self.value(id);
        Ok(match op {
            Op::Leaf => unreachable!("leaves hold their own values"),
            Op::MatMul(x, w) => v(*x).dot(v(*w)),
            Op::AddRow(x, b) => v(*x) + v(*b),
            Op::Add(x, y) => v(*x) + v(*y),
            Op::Mul(x, y) => v(*x) * v(*y),
            Op::Scale(x, f) => v(*x) * *f,
            Op::Sigmoid(x) => v(*x).mapv(ops::sigmoid),
            Op::Exp(x) => v(*x).mapv(f64::exp),
            Op::Log(x) => v(*x).mapv(f64::ln),
            Op::SliceCols(x, a, b) => v(*x).slice(s![.., *a..*b]).to_owned(),
            Op::MaxPool(x) => {
                let (best, _) = ops::max_pool_rows(v(*x).view());
                Tensor::from_shape_vec((1, best.len()), best).expect("row vector")
            }
            Op::MeanPool(x) => v(*x).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0)),
            Op::Sum(x) => Tensor::from_elem((1, 1), v(*x).sum()),
            Op::LayerNorm { x, gamma, beta } => ops::layer_norm_rows(v(*x).view(), v(*gamma).view(), v(*beta).view()),
            Op::SsmConv(inp) => {
                ops::ssm_layer(v(inp.x).view(), self.ssm_weights(inp), inp.rule, ops::SsmMode::Convolution)?
            }
            Op::SoftmaxLogLoss { logits, labels } => {
                let z = v(*logits);
                let mut total = 0.0;
                for (row, &c) in z.outer_iter().zip(labels) {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                    total += lse - row[c];
                }
                Tensor::from_elem((1, 1), total / z.nrows() as f64)
            }
        })
    }

    /// Evaluates every node and returns the value of the last one, which must
    /// be a scalar.
    pub fn forward(&mut self) -> Result<f64> {
        let last = self
            .nodes
            .last()
            .ok_or(Error::EmptyInput("forward on an empty tape"))?;
        if last.shape != (1, 1) {
            return Err(mismatch("forward", last.shape, (1, 1)));
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            debug_assert_eq!(value.dim(), self.nodes[i].shape);
            self.nodes[i].value = value;
        }
        Ok(self.nodes.last().expect("checked above").value[[0, 0]])
    }

    /// Value of the final scalar node from the latest forward pass.
    pub fn loss(&self) -> f64 {
        self.nodes.last().map_or(f64::NAN, |n| n.value[[0, 0]])
    }

    /// Populates gradients of the final scalar node with respect to every
    /// node. Requires a preceding [`Tape::forward`].
    pub fn backward(&mut self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::EmptyInput("backward on an empty tape"));
        }
        for node in &mut self.nodes {
            if node.value.dim() != node.shape {
                return Err(Error::ContractViolation("backward called before forward".into()));
            }
            node.grad = Tensor::zeros(node.shape);
        }
        self.nodes[n - 1].grad.fill(1.0);
        for i in (0..n).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let upstream = std::mem::replace(&mut self.nodes[i].grad, Tensor::zeros((0, 0)));
            let op = self.nodes[i].op.clone();
            self.backprop(i, &op, &upstream)?;
            self.nodes[i].grad = upstream;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor) {
        self.nodes[id.0].grad += delta;
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(x, w) => {
                let dx = g.dot(&self.value(*w).t());
                let dw = self.value(*x).t().dot(g);
                self.accumulate(*x, &dx);
                self.accumulate(*w, &dw);
            }
            Op::AddRow(x, b) => {
                self.accumulate(*x, g);
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(*b, &db);
            }
            Op::Add(x, y) => {
                self.accumulate(*x, g);
                self.accumulate(*y, g);
            }
            Op::Mul(x, y) => {
                let dx = g * self.value(*y);
                let dy = g * self.value(*x);
                self.accumulate(*x, &dx);
                self.accumulate(*y, &dy);
            }
            Op::Scale(x, f) => {
                let dx = g * *f;
                self.accumulate(*x, &dx);
            }
            Op::Sigmoid(x) => {
                let out = &self.nodes[i].value;
                let dx = g * &out.mapv(|s| s * (1.0 - s));
                self.accumulate(*x, &dx);
            }
            Op::Exp(x) => {
                let dx = g * &self.nodes[i].value;
                self.accumulate(*x, &dx);
            }
            Op::Log(x) => {
                let dx = g / self.value(*x);
                self.accumulate(*x, &dx);
            }
            Op::SliceCols(x, a, b) => {
                let mut slot = self.nodes[x.0].grad.slice_mut(s![.., *a..*b]);
                slot += g;
            }
            Op::MaxPool(x) => {
                let (_, arg) = ops::max_pool_rows(self.value(*x).view());
                let grad = &mut self.nodes[x.0].grad;
                for (j, &r) in arg.iter().enumerate() {
                    grad[[r, j]] += g[[0, j]];
                }
            }
            Op::MeanPool(x) => {
                let rows = self.shape(*x).0 as f64;
                let mut grad = std::mem::take(&mut self.nodes[x.0].grad);
                for mut row in grad.outer_iter_mut() {
                    row.scaled_add(1.0 / rows, &g.row(0));
                }
                self.nodes[x.0].grad = grad;
            }
            Op::Sum(x) => {
                let s = g[[0, 0]];
                self.nodes[x.0].grad.mapv_inplace(|v| v + s);
            }
            Op::LayerNorm { x, gamma, beta } => self.backprop_layer_norm(*x, *gamma, *beta, g),
            Op::SsmConv(inp) => self.backprop_ssm(inp, g)?,
            Op::SoftmaxLogLoss { logits, labels } => {
                let z = self.value(*logits);
                let rows = z.nrows() as f64;
                let mut dz = ops::softmax_rows(z.view());
                for (mut row, &c) in dz.outer_iter_mut().zip(labels) {
                    row[c] -= 1.0;
                }
                dz *= g[[0, 0]] / rows;
                self.accumulate(*logits, &dz);
            }
        }
        Ok(())
    }

    fn backprop_layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, g: &Tensor) {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let (mean, rstd) = ops::row_moments(xv.view());
        let cols = xv.ncols();
        let n = cols as f64;
        let mut dx = Tensor::zeros(xv.dim());
        let mut dgamma = Tensor::zeros((1, cols));
        let mut dbeta = Tensor::zeros((1, cols));
        let mut xhat = vec![0.0; cols];
        let mut dxhat = vec![0.0; cols];
        for r in 0..xv.nrows() {
            for j in 0..cols {
                xhat[j] = (xv[[r, j]] - mean[r]) * rstd[r];
                dxhat[j] = g[[r, j]] * gv[[0, j]];
                dgamma[[0, j]] += g[[r, j]] * xhat[j];
                dbeta[[0, j]] += g[[r, j]];
            }
            let m1 = dxhat.iter().sum::<f64>() / n;
            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
            for j in 0..cols {
                dx[[r, j]] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
        self.accumulate(x, &dx);
        self.accumulate(gamma, &dgamma);
        self.accumulate(beta, &dbeta);
    }

    fn backprop_ssm(&mut self, inp: &SsmConvInputs, g: &Tensor) -> Result<()> {
        let x = self.value(inp.x);
        let (len, h) = x.dim();
        let conv = FftConvolver::new(len);
        let weights = self.ssm_weights(inp);
        let grads: Vec<SsmConvGrads> = (0..h)
            .into_par_iter()
            .map(|ch| {
                let params = weights.channel(ch)?;
                let u = x.column(ch).to_vec();
                let up = g.column(ch).to_vec();
                ssm_grad::grad_channel(&params, inp.rule, &u, &up, &conv, ch)
            })
            .collect::<Result<_>>()?;
        let n_half = weights.n_half();
        let mut dx = Tensor::zeros((len, h));
        let mut da_re = Tensor::zeros((h, n_half));
        let mut da_im = Tensor::zeros((h, n_half));
        let mut dc_re = Tensor::zeros((h, n_half));
        let mut dc_im = Tensor::zeros((h, n_half));
        let mut dd = Tensor::zeros((1, h));
        let mut dlog_dt = Tensor::zeros((1, h));
        for (ch, gr) in grads.into_iter().enumerate() {
            dx.column_mut(ch).iter_mut().zip(&gr.u).for_each(|(o, v)| *o = *v);
            for k in 0..n_half {
                da_re[[ch, k]] = gr.a[k].re;
                da_im[[ch, k]] = gr.a[k].im;
                dc_re[[ch, k]] = gr.c[k].re;
                dc_im[[ch, k]] = gr.c[k].im;
            }
            dd[[0, ch]] = gr.d;
            dlog_dt[[0, ch]] = gr.log_dt;
        }
        self.accumulate(inp.x, &dx);
        self.accumulate(inp.a_re, &da_re);
        self.accumulate(inp.a_im, &da_im);
        self.accumulate(inp.c_re, &dc_re);
        self.accumulate(inp.c_im, &dc_im);
        self.accumulate(inp.d, &dd);
        self.accumulate(inp.log_dt, &dlog_dt);
        Ok(())
    }
}
