//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Every differentiable primitive appends one node holding its value and the
//! indices of its parents. Nodes are stored in execution order, so a reverse
//! sweep over the tape visits each node after all of its consumers.

mod gradcheck;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

pub use gradcheck::{finite_difference_check, grad_check, GradCheckOptions, GradCheckReport};

use crate::error::{shape_err, Error, Result};
use crate::gvto::{attention_backward, attention_forward, AttentionSchedule, Normalizer};
use crate::nnops::{self, BatchNormParams, BatchStats};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Conv { x: Var, kernel: Var, bias: Option<Var>, stride: [usize; 3] },
    ConvTransposed { x: Var, kernel: Var, bias: Option<Var>, stride: [usize; 3] },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, stats: BatchStats, epsilon: f64 },
    BatchNormInfer { x: Var, gamma: Var, beta: Var, params: Box<BatchNormParams<T>> },
    Concat(Var, Var),
    Softmax { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    Attention { q: Var, k: Var, v: Var, normalizer: Normalizer },
    Mse(Var, Var),
    Mae(Var, Var),
}

impl<T> Op<T> {
    pub(crate) fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Relu(..) => "relu",
            Op::Conv { .. } => "conv",
            Op::ConvTransposed { .. } => "conv_transposed",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormInfer { .. } => "batch_norm_infer",
            Op::Concat(..) => "concat",
            Op::Softmax { .. } => "softmax",
            Op::SumAxis { .. } => "sum_axis",
            Op::Attention { .. } => "attention",
            Op::Mse(..) => "mse",
            Op::Mae(..) => "mae",
        }
    }
}

/// One recorded value.
#[derive(Clone, Debug)]
pub struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T: Element> Node<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn op_tag(&self) -> &'static str {
        self.op.tag()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Forward-execution record.
#[derive(Clone, Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    schedule: AttentionSchedule,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros if the loss does not reach it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), schedule: AttentionSchedule::default() }
    }

    pub fn with_schedule(schedule: AttentionSchedule) -> Self {
        Tape { nodes: Vec::new(), schedule }
    }

    pub fn schedule(&self) -> AttentionSchedule {
        self.schedule
    }

    pub fn set_schedule(&mut self, schedule: AttentionSchedule) {
        self.schedule = schedule;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = nnops::relu(self.value(a));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn conv(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: [usize; 3]) -> Result<Var> {
        let v = nnops::conv_forward(self.value(x), self.value(kernel), bias.map(|b| self.value(b)), stride)?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        Ok(self.push(v, Op::Conv { x, kernel, bias, stride }, &parents))
    }

    pub fn conv_transposed(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: [usize; 3]) -> Result<Var> {
        let v = nnops::conv_transposed_forward(self.value(x), self.value(kernel), bias.map(|b| self.value(b)), stride)?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        Ok(self.push(v, Op::ConvTransposed { x, kernel, bias, stride }, &parents))
    }

    /// Training-mode batch norm; returns the output and the batch statistics
    /// the caller folds into its running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<(Var, BatchStats)> {
        let (v, stats) = nnops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), epsilon)?;
        let op = Op::BatchNormTrain { x, gamma, beta, stats: stats.clone(), epsilon };
        Ok((self.push(v, op, &[x, gamma, beta]), stats))
    }

    /// Inference-mode batch norm against the running statistics in `params`;
    /// `gamma` and `beta` are taken from the tape.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, params: &BatchNormParams<T>) -> Result<Var> {
        let mut p = params.clone();
        p.gamma = self.value(gamma).clone();
        p.beta = self.value(beta).clone();
        let v = nnops::batch_norm_infer(self.value(x), &p)?;
        Ok(self.push(v, Op::BatchNormInfer { x, gamma, beta, params: Box::new(p) }, &[x, gamma, beta]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = nnops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Concat(a, b), &[a, b]))
    }

    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = nnops::softmax_axis(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax { x, axis }, &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = nnops::sum_axis(self.value(x), axis)?;
        Ok(self.push(v, Op::SumAxis { x, axis }, &[x]))
    }

    /// Batched attention on channel-last tensors,
    /// `q: [n, ..query grid, c]`, `k, v: [n, ..key grid, c]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, normalizer: Normalizer) -> Result<Var> {
        let out = attention_forward(self.value(q), self.value(k), self.value(v), normalizer, self.schedule)?;
        Ok(self.push(out, Op::Attention { q, k, v, normalizer }, &[q, k, v]))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.check_same_shape(t)?;
        let n = p.len() as f64;
        let s: f64 = p.data().iter().zip(t.data()).map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(s / n)), Op::Mse(pred, target), &[pred, target]))
    }

    pub fn mae(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.check_same_shape(t)?;
        let n = p.len() as f64;
        let s: f64 = p.data().iter().zip(t.data()).map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs()).sum();
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(s / n)), Op::Mae(pred, target), &[pred, target]))
    }

    /// Hash of the on/off pattern of every kink (ReLU gates, MAE signs). Two
    /// evaluations with equal patterns lie on the same differentiable piece.
    pub fn kink_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => {
                    for &v in self.value(a).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::Mae(p, t) => {
                    for (&a, &b) in self.value(p).data().iter().zip(self.value(t).data()) {
                        a.partial_cmp(&b).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != [1] {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(&[1]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.axpy(T::one(), &pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian products of one node with respect to its parents.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
            Op::Relu(a) => vec![(*a, nnops::relu_backward(val(*a), g))],
            Op::Conv { x, kernel, bias, stride } => {
                let (dx, dk, db) = nnops::conv_backward(val(*x), val(*kernel), g, *stride)?;
                let mut v = vec![(*x, dx), (*kernel, dk)];
                if let Some(b) = bias {
                    v.push((*b, db));
                }
                v
            }
            Op::ConvTransposed { x, kernel, bias, stride } => {
                let (dx, dk, db) = nnops::conv_transposed_backward(val(*x), val(*kernel), g, *stride)?;
                let mut v = vec![(*x, dx), (*kernel, dk)];
                if let Some(b) = bias {
                    v.push((*b, db));
                }
                v
            }
            Op::BatchNormTrain { x, gamma, beta, stats, epsilon } => {
                let (dx, dg, db) = nnops::batch_norm_train_backward(val(*x), val(*gamma), stats, *epsilon, g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::BatchNormInfer { x, gamma, beta, params } => {
                let (dx, dg, db) = nnops::batch_norm_infer_backward(val(*x), params, val(*gamma), g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Concat(a, b) => {
                let (ga, gb) = nnops::split_channels(g, val(*a).channels());
                vec![(*a, ga), (*b, gb)]
            }
            Op::Softmax { x, axis } => vec![(*x, nnops::softmax_axis_backward(&node.value, g, *axis))],
            Op::SumAxis { x, axis } => vec![(*x, nnops::sum_axis_backward(val(*x).shape(), g, *axis))],
            Op::Attention { q, k, v, normalizer } => {
                let (dq, dk, dv) = attention_backward(val(*q), val(*k), val(*v), *normalizer, g)?;
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Mse(p, t) => {
                let n = val(*p).len() as f64;
                let s = g.data()[0].as_f64() * 2.0 / n;
                let d = val(*p).zip_map(val(*t), |a, b| T::from_f64_lossy(s * (a.as_f64() - b.as_f64())))?;
                let neg = d.scale(-T::one());
                vec![(*p, d), (*t, neg)]
            }
            Op::Mae(p, t) => {
                let n = val(*p).len() as f64;
                let s = g.data()[0].as_f64() / n;
                let d = val(*p).zip_map(val(*t), |a, b| {
                    let sign = if a > b {
                        1.0
                    } else if a < b {
                        -1.0
                    } else {
                        0.0
                    };
                    T::from_f64_lossy(s * sign)
                })?;
                let neg = d.scale(-T::one());
                vec![(*p, d), (*t, neg)]
            }
        };
        for (p, t) in &out {
            if t.shape() != self.value(*p).shape() {
                return shape_err(format!(
                    "internal: {} produced gradient {:?} for value {:?}",
                    node.op.tag(),
                    t.shape(),
                    self.value(*p).shape()
                ));
            }
        }
        Ok(out)
    }
}
