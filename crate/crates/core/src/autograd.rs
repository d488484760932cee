//! Reverse-mode differentiation over a recorded tape of tensor primitives.
//!
//! A [`Tape`] records every primitive in execution order together with its
//! output value and any intermediates its adjoint needs. [`Tape::backward`]
//! walks the records in reverse, applying one hand-written adjoint rule per
//! primitive and accumulating across fan-out.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, channel_stats, conv2d, conv2d_grad_input, conv2d_grad_weight, Conv2dGeom, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    Relu6(Var),
    Sigmoid(Var),
    Softmax(Var, f64),
    SliceCols(Var, usize, usize),
    Slice0(Var, usize, usize),
    Concat0(Vec<Var>),
    BlockDiag(Vec<Var>),
    ScaleRows(Var, Var),
    ModeN(Var, Var, usize),
    Conv2d(Var, Var, Conv2dGeom),
    GlobalAvgPool(Var),
    MaxPool(Var, usize, usize, usize),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    Sum(Var),
    SoftmaxCrossEntropy(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::AddRowBias(..) => "add_row_bias",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::Relu(..) => "relu",
            Op::Relu6(..) => "relu6",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::SliceCols(..) => "slice_cols",
            Op::Slice0(..) => "slice0",
            Op::Concat0(..) => "concat0",
            Op::BlockDiag(..) => "block_diag",
            Op::ScaleRows(..) => "scale_rows",
            Op::ModeN(..) => "mode_n_product",
            Op::Conv2d(..) => "conv2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::MaxPool(..) => "max_pool2d",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Sum(..) => "sum",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul(a, b)
            | Op::AddRowBias(a, b)
            | Op::AddChannelBias(a, b)
            | Op::ScaleRows(a, b)
            | Op::ModeN(a, b, _)
            | Op::Conv2d(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Relu6(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a, _)
            | Op::SliceCols(a, ..)
            | Op::Slice0(a, ..)
            | Op::GlobalAvgPool(a)
            | Op::MaxPool(a, ..)
            | Op::Sum(a)
            | Op::SoftmaxCrossEntropy(a, _) => vec![*a],
            Op::Concat0(v) | Op::BlockDiag(v) => v.clone(),
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
        }
    }
}

/// Values an adjoint needs beyond the op's inputs and output.
#[derive(Clone, Debug, Default)]
struct Saved {
    tensor: Option<Tensor>,
    argmax: Vec<usize>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    saved: Saved,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    names: BTreeMap<String, Var>,
    fault: Option<(&'static str, f64)>,
}

/// Gradients of a scalar loss keyed by leaf name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Named leaves registered so far, in name order.
    pub fn named_leaves(&self) -> impl Iterator<Item = (&String, Var)> {
        self.names.iter().map(|(k, v)| (k, *v))
    }

    /// Registers a differentiable leaf under a unique name.
    pub fn param(&mut self, name: impl Into<String>, value: &Tensor) -> Result<Var> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate leaf name {name}")));
        }
        let v = self.push_leaf(value.clone(), true);
        self.names.insert(name, v);
        Ok(v)
    }

    /// Records a constant; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Test fixture: multiplies every adjoint produced by primitives named
    /// `op` by `factor`. Used to show that gradient checks catch a wrong rule.
    pub fn inject_adjoint_fault(&mut self, op: &'static str, factor: f64) {
        self.fault = Some((op, factor));
    }

    /// Batch mean and biased variance captured by a training-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match self.nodes[v.0].op {
            Op::BatchNormTrain { .. } => Some((&self.nodes[v.0].saved.mean, &self.nodes[v.0].saved.var)),
            _ => None,
        }
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            saved: Saved::default(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            saved,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn eval(&self, op: &Op) -> Result<(Tensor, Saved)> {
        let plain = |t: Tensor| Ok((t, Saved::default()));
        match op {
            Op::Leaf => Err(Error::InvalidArgument("leaf has no forward rule".into())),
            Op::Add(a, b) => plain(self.val(*a).add(self.val(*b))?),
            Op::Sub(a, b) => plain(self.val(*a).sub(self.val(*b))?),
            Op::Mul(a, b) => plain(self.val(*a).mul(self.val(*b))?),
            Op::Scale(a, f) => plain(self.val(*a).scale(*f)?),
            Op::AddScalar(a, f) => plain(self.val(*a).add_scalar(*f)?),
            Op::Matmul(a, b) => plain(self.val(*a).matmul(self.val(*b))?),
            Op::Transpose(a) => plain(self.val(*a).transpose()?),
            Op::Reshape(_) => unreachable!("reshape carries its target shape in the node value"),
            Op::AddRowBias(a, b) => plain(self.val(*a).add_row_bias(self.val(*b))?),
            Op::AddChannelBias(a, b) => plain(self.val(*a).add_channel_bias(self.val(*b))?),
            Op::Relu(a) => plain(self.val(*a).relu()?),
            Op::Relu6(a) => plain(self.val(*a).relu6()?),
            Op::Sigmoid(a) => plain(self.val(*a).sigmoid()?),
            Op::Softmax(a, t) => plain(self.val(*a).softmax_rows(*t)?),
            Op::SliceCols(a, s, e) => plain(self.val(*a).slice_cols(*s, *e)?),
            Op::Slice0(a, s, e) => plain(self.val(*a).slice0(*s, *e)?),
            Op::Concat0(vs) => {
                let parts: Vec<&Tensor> = vs.iter().map(|v| self.val(*v)).collect();
                plain(Tensor::concat0(&parts)?)
            }
            Op::BlockDiag(vs) => {
                let parts: Vec<&Tensor> = vs.iter().map(|v| self.val(*v)).collect();
                plain(Tensor::block_diag(&parts)?)
            }
            Op::ScaleRows(m, f) => plain(self.val(*m).scale_rows(self.val(*f))?),
            Op::ModeN(t, m, axis) => plain(self.val(*t).mode_n_product(self.val(*m), *axis)?),
            Op::Conv2d(x, w, g) => plain(conv2d(self.val(*x), self.val(*w), *g)?),
            Op::GlobalAvgPool(x) => plain(self.val(*x).global_avg_pool()?),
            Op::MaxPool(x, k, s, p) => {
                let (y, argmax) = tensor::max_pool2d(self.val(*x), *k, *s, *p)?;
                Ok((
                    y,
                    Saved {
                        argmax,
                        ..Saved::default()
                    },
                ))
            }
            Op::BatchNormTrain { x, gamma, beta, eps } => {
                let (mean, var) = channel_stats(self.val(*x))?;
                let (y, xhat) = tensor::batch_norm_apply(self.val(*x), self.val(*gamma), self.val(*beta), &mean, &var, *eps)?;
                Ok((
                    y,
                    Saved {
                        tensor: Some(xhat),
                        mean,
                        var,
                        ..Saved::default()
                    },
                ))
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let (y, xhat) = tensor::batch_norm_apply(self.val(*x), self.val(*gamma), self.val(*beta), mean, var, *eps)?;
                Ok((
                    y,
                    Saved {
                        tensor: Some(xhat),
                        ..Saved::default()
                    },
                ))
            }
            Op::Sum(a) => plain(Tensor::scalar(self.val(*a).sum())?),
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let l = self.val(*logits);
                if l.ndim() != 2 || l.rows() != labels.len() {
                    return Err(Error::ShapeMismatch {
                        op: "softmax_cross_entropy",
                        left: l.shape().to_vec(),
                        right: vec![labels.len()],
                    });
                }
                let k = l.cols();
                if labels.iter().any(|y| *y >= k) {
                    return Err(Error::InvalidArgument("label out of range".into()));
                }
                let p = l.softmax_rows(1.0)?;
                let mut loss = 0.0;
                for (n, y) in labels.iter().enumerate() {
                    // log-sum-exp form keeps tiny probabilities finite
                    let row = &l.data()[n * k..(n + 1) * k];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in row {
                        z += (v - m).exp();
                    }
                    loss += m + z.ln() - row[*y];
                }
                Ok((
                    Tensor::scalar(loss / labels.len() as f64)?,
                    Saved {
                        tensor: Some(p),
                        ..Saved::default()
                    },
                ))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, value: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.val(a).reshape(shape)?;
        let requires_grad = self.nodes[a.0].requires_grad;
        self.nodes.push(Node {
            op: Op::Reshape(a),
            value,
            saved: Saved::default(),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRowBias(x, bias))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddChannelBias(x, bias))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn relu6(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu6(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.push(Op::Softmax(a, temperature))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols(a, start, end))
    }

    pub fn slice0(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::Slice0(a, start, end))
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::Concat0(parts.to_vec()))
    }

    pub fn block_diag(&mut self, blocks: &[Var]) -> Result<Var> {
        self.push(Op::BlockDiag(blocks.to_vec()))
    }

    pub fn scale_rows(&mut self, m: Var, factors: Var) -> Result<Var> {
        self.push(Op::ScaleRows(m, factors))
    }

    pub fn mode_n_product(&mut self, t: Var, m: Var, axis: usize) -> Result<Var> {
        self.push(Op::ModeN(t, m, axis))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: Conv2dGeom) -> Result<Var> {
        self.push(Op::Conv2d(x, w, geom))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        self.push(Op::MaxPool(x, k, stride, padding))
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.push(Op::BatchNormTrain { x, gamma, beta, eps })
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        self.push(Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            var: var.to_vec(),
            eps,
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    /// Mean softmax cross-entropy of `logits` (`N×K`) against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(Op::SoftmaxCrossEntropy(logits, labels.to_vec()))
    }

    /// Re-executes every recorded primitive from its recorded inputs and
    /// reports whether each output is reproduced bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.inputs().iter().any(|v| v.0 >= i) {
                return Ok(false);
            }
            let fresh = match &node.op {
                Op::Leaf => continue,
                Op::Reshape(a) => self.val(*a).reshape(node.value.shape().to_vec())?,
                op => self.eval(op)?.0,
            };
            let same =
                fresh.shape() == node.value.shape() && fresh.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Propagates `seed · ∂loss` back to every named leaf. Leaves the loss does
    /// not depend on receive exact zeros.
    pub fn backward(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let lv = self.val(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        if !seed.is_finite() {
            return Err(Error::NonFinite {
                op: "backward seed",
                index: 0,
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), seed));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let contributions = self.adjoint(node, &g)?;
            let factor = match self.fault {
                Some((name, f)) if name == node.op.name() => Some(f),
                _ => None,
            };
            for (input, contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let contrib = match factor {
                    Some(f) => contrib.scale(f)?,
                    None => contrib,
                };
                grads[input.0] = Some(match grads[input.0].take() {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                });
            }
        }
        let mut by_name = BTreeMap::new();
        for (name, v) in &self.names {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.val(*v).shape().to_vec()));
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }

    fn adjoint(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0)?)],
            Op::Mul(a, b) => vec![(*a, g.mul(self.val(*b))?), (*b, g.mul(self.val(*a))?)],
            Op::Scale(a, f) => vec![(*a, g.scale(*f)?)],
            Op::AddScalar(a, _) => vec![(*a, g.clone())],
            Op::Matmul(a, b) => vec![
                (*a, g.matmul(&self.val(*b).transpose()?)?),
                (*b, self.val(*a).transpose()?.matmul(g)?),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Reshape(a) => vec![(*a, g.reshape(self.val(*a).shape().to_vec())?)],
            Op::AddRowBias(x, b) => {
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::new(self.val(*b).shape().to_vec(), gb)?)]
            }
            Op::AddChannelBias(x, b) => {
                let (n, c) = (g.shape()[0], g.shape()[1]);
                let spatial = g.numel() / (n * c).max(1);
                let mut gb = vec![0.0; c];
                for s in 0..n {
                    for (ch, acc) in gb.iter_mut().enumerate() {
                        for v in &g.data()[(s * c + ch) * spatial..(s * c + ch + 1) * spatial] {
                            *acc += v;
                        }
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::new(self.val(*b).shape().to_vec(), gb)?)]
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::Relu6(a) => {
                let x = self.val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x > 0.0 && *x < 6.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(*a, Tensor::new(out.shape().to_vec(), d)?)]
            }
            Op::Softmax(a, t) => {
                let k = out.cols();
                let mut d = Vec::with_capacity(out.numel());
                for (yr, gr) in out.data().chunks(k).zip(g.data().chunks(k)) {
                    let mut dot = 0.0;
                    for (y, g) in yr.iter().zip(gr) {
                        dot += y * g;
                    }
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot) / t));
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), d)?)]
            }
            Op::SliceCols(a, s, _) => {
                let src = self.val(*a);
                let (r, c) = (src.rows(), src.cols());
                let w = g.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + s..i * c + s + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![(*a, Tensor::new(src.shape().to_vec(), d)?)]
            }
            Op::Slice0(a, s, _) => {
                let src = self.val(*a);
                let inner = src.numel() / src.shape()[0].max(1);
                let mut d = vec![0.0; src.numel()];
                d[s * inner..s * inner + g.numel()].copy_from_slice(g.data());
                vec![(*a, Tensor::new(src.shape().to_vec(), d)?)]
            }
            Op::Concat0(vs) => {
                let mut start = 0;
                let mut res = Vec::with_capacity(vs.len());
                for v in vs {
                    let rows = self.val(*v).shape()[0];
                    res.push((*v, g.slice0(start, start + rows)?));
                    start += rows;
                }
                res
            }
            Op::BlockDiag(vs) => {
                let cols = g.cols();
                let (mut r0, mut c0) = (0, 0);
                let mut res = Vec::with_capacity(vs.len());
                for v in vs {
                    let (br, bc) = (self.val(*v).rows(), self.val(*v).cols());
                    let mut d = Vec::with_capacity(br * bc);
                    for i in 0..br {
                        d.extend_from_slice(&g.data()[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + bc]);
                    }
                    res.push((*v, Tensor::new(vec![br, bc], d)?));
                    r0 += br;
                    c0 += bc;
                }
                res
            }
            Op::ScaleRows(m, f) => {
                let mv = self.val(*m);
                let fv = self.val(*f);
                let rows = mv.shape()[0];
                let inner = mv.numel() / rows.max(1);
                let mut gf = vec![0.0; rows];
                for (i, acc) in gf.iter_mut().enumerate() {
                    for (a, b) in g.data()[i * inner..(i + 1) * inner]
                        .iter()
                        .zip(&mv.data()[i * inner..(i + 1) * inner])
                    {
                        *acc += a * b;
                    }
                }
                vec![(*m, g.scale_rows(fv)?), (*f, Tensor::new(fv.shape().to_vec(), gf)?)]
            }
            Op::ModeN(t, m, axis) => {
                let tv = self.val(*t);
                let mv = self.val(*m);
                let gt = g.mode_n_product(&mv.transpose()?, *axis)?;
                let gm = mode_gram(g, tv, *axis)?;
                vec![(*t, gt), (*m, gm)]
            }
            Op::Conv2d(x, w, geom) => {
                let xv = self.val(*x);
                let wv = self.val(*w);
                vec![
                    (*x, conv2d_grad_input(g, wv, xv.shape(), *geom)?),
                    (*w, conv2d_grad_weight(g, xv, wv.shape(), *geom)?),
                ]
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.val(*x);
                let hw = xv.shape()[2] * xv.shape()[3];
                let mut d = Vec::with_capacity(xv.numel());
                for v in g.data() {
                    d.extend(std::iter::repeat_n(v / hw as f64, hw));
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), d)?)]
            }
            Op::MaxPool(x, ..) => {
                let xv = self.val(*x);
                let mut d = vec![0.0; xv.numel()];
                for (gv, at) in g.data().iter().zip(&node.saved.argmax) {
                    d[*at] += gv;
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), d)?)]
            }
            Op::BatchNormTrain { x, gamma, beta, eps } => {
                let xv = self.val(*x);
                let gam = self.val(*gamma);
                let xhat = node.saved.tensor.as_ref().expect("batch norm saves x-hat");
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let spatial = xv.numel() / (n * c).max(1);
                let m = (n * spatial) as f64;
                let mut gx = vec![0.0; xv.numel()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for s in 0..n {
                        let base = (s * c + ch) * spatial;
                        for i in base..base + spatial {
                            sg += g.data()[i];
                            sgx += g.data()[i] * xhat.data()[i];
                        }
                    }
                    gb[ch] = sg;
                    gg[ch] = sgx;
                    let inv = 1.0 / (node.saved.var[ch] + eps).sqrt();
                    let k = gam.data()[ch] * inv / m;
                    for s in 0..n {
                        let base = (s * c + ch) * spatial;
                        for i in base..base + spatial {
                            gx[i] = k * (m * g.data()[i] - sg - xhat.data()[i] * sgx);
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), gx)?),
                    (*gamma, Tensor::new(gam.shape().to_vec(), gg)?),
                    (*beta, Tensor::new(self.val(*beta).shape().to_vec(), gb)?),
                ]
            }
            Op::BatchNormEval {
                x, gamma, beta, var, eps, ..
            } => {
                let xv = self.val(*x);
                let gam = self.val(*gamma);
                let xhat = node.saved.tensor.as_ref().expect("batch norm saves x-hat");
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let spatial = xv.numel() / (n * c).max(1);
                let mut gx = vec![0.0; xv.numel()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let k = gam.data()[ch] / (var[ch] + eps).sqrt();
                        let base = (s * c + ch) * spatial;
                        for i in base..base + spatial {
                            gx[i] = g.data()[i] * k;
                            gg[ch] += g.data()[i] * xhat.data()[i];
                            gb[ch] += g.data()[i];
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), gx)?),
                    (*gamma, Tensor::new(gam.shape().to_vec(), gg)?),
                    (*beta, Tensor::new(self.val(*beta).shape().to_vec(), gb)?),
                ]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.val(*a).shape().to_vec(), g.item()?))],
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let p = node.saved.tensor.as_ref().expect("cross entropy saves probabilities");
                let k = p.cols();
                let scale = g.item()? / labels.len() as f64;
                let mut d = p.data().to_vec();
                for (n, y) in labels.iter().enumerate() {
                    d[n * k + y] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                vec![(*logits, Tensor::new(p.shape().to_vec(), d)?)]
            }
        })
    }
}

/// `unfold_axis(g) · unfold_axis(t)ᵀ`: gradient of `t ×_axis m` with respect to `m`.
fn mode_gram(g: &Tensor, t: &Tensor, axis: usize) -> Result<Tensor> {
    let p = g.shape()[axis];
    let e = t.shape()[axis];
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let mut out = vec![0.0; p * e];
    for o in 0..outer {
        for r in 0..p {
            let gr = &g.data()[(o * p + r) * inner..(o * p + r + 1) * inner];
            for k in 0..e {
                let tr = &t.data()[(o * e + k) * inner..(o * e + k + 1) * inner];
                let mut acc = 0.0;
                for (a, b) in gr.iter().zip(tr) {
                    acc += a * b;
                }
                out[r * e + k] += acc;
            }
        }
    }
    Tensor::new(vec![p, e], out)
}
