//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because nodes can only reference earlier nodes.
//! Every reduction runs in a fixed index order, so repeated runs over the same
//! inputs are bitwise identical.

mod attention;
mod spatial;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Mask, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Clamp01(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: spatial::ConvGeom,
        cols: Vec<f64>,
    },
    Concat(Vec<Var>),
    Upsample2x(Var),
    AvgPool2(Var),
    DiffX(Var),
    DiffY(Var),
    GatherPatches {
        input: Var,
        index: attention::PatchIndex,
    },
    GatherPoints {
        input: Var,
        centers: Vec<usize>,
    },
    RowDot {
        keys: Var,
        patches: Var,
        scale: f64,
    },
    WeightedSum {
        weights: Var,
        values: Var,
    },
    MaskedSoftmax {
        logits: Var,
        valid: Mask,
    },
    ScatterAdd {
        base: Var,
        values: Vec<Var>,
        centers: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor,
        valid: Mask,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a differentiable computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

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
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub(crate) fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self
            .parents(&op)
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Clamp01(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Upsample2x(a)
            | Op::AvgPool2(a)
            | Op::DiffX(a)
            | Op::DiffY(a) => vec![*a],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Concat(vs) => vs.clone(),
            Op::GatherPatches { input, .. } | Op::GatherPoints { input, .. } => vec![*input],
            Op::RowDot { keys, patches, .. } => vec![*keys, *patches],
            Op::WeightedSum { weights, values } => vec![*weights, *values],
            Op::MaskedSoftmax { logits, .. } => vec![*logits],
            Op::ScatterAdd { base, values, .. } => {
                let mut v = vec![*base];
                v.extend(values.iter().copied());
                v
            }
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a))
    }

    /// `x` for positive inputs, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push("leaky_relu", v, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a))
    }

    pub fn clamp01(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.clamp(0.0, 1.0));
        self.push("clamp01", v, Op::Clamp01(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push("abs", v, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(invalid("mean", "mean of an empty tensor"));
        }
        let m = t.sum() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a))
    }

    /// Sums a list of same-shape vars left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| invalid("add_all", "no operands"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Propagates gradients from the scalar `loss` into every tracked ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed_shape = self.shape(loss).to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarSeed(seed_shape));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        add_into(&mut self.grads[loss.0], &[1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            self.backprop(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&mut self, id: usize, g: &[f64]) {
        // Temporarily move the op out so parent gradient slots can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(s) = self.slot(*a) {
                    axpy(s, g, 1.0);
                }
                if let Some(s) = self.slot(*b) {
                    axpy(s, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(*a) {
                    axpy(s, g, 1.0);
                }
                if let Some(s) = self.slot(*b) {
                    axpy(s, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data().to_vec();
                let av = self.nodes[a.0].value.data().to_vec();
                if let Some(s) = self.slot(*a) {
                    for ((s, &gi), &y) in s.iter_mut().zip(g).zip(&bv) {
                        *s += gi * y;
                    }
                }
                if let Some(s) = self.slot(*b) {
                    for ((s, &gi), &x) in s.iter_mut().zip(g).zip(&av) {
                        *s += gi * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(s) = self.slot(*a) {
                    axpy(s, g, c);
                }
            }
            Op::Relu(a) => self.unary_backward(*a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, id),
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                self.unary_backward(*a, g, |x, _| if x > 0.0 { 1.0 } else { slope }, id)
            }
            Op::Sigmoid(a) => self.unary_backward(*a, g, |_, y| y * (1.0 - y), id),
            Op::Clamp01(a) => {
                self.unary_backward(*a, g, |x, _| if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 }, id)
            }
            Op::Abs(a) => self.unary_backward(
                *a,
                g,
                |x, _| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                },
                id,
            ),
            Op::Sum(a) => {
                let g0 = g[0];
                if let Some(s) = self.slot(*a) {
                    s.iter_mut().for_each(|v| *v += g0);
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let g0 = g[0] / n;
                if let Some(s) = self.slot(*a) {
                    s.iter_mut().for_each(|v| *v += g0);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => self.conv2d_backward(*input, *kernel, *bias, geom, cols, g),
            Op::Concat(parts) => self.concat_backward(parts, g),
            Op::Upsample2x(a) => self.upsample_backward(*a, g),
            Op::AvgPool2(a) => self.avgpool_backward(*a, g),
            Op::DiffX(a) => self.diff_backward(*a, g, false),
            Op::DiffY(a) => self.diff_backward(*a, g, true),
            Op::GatherPatches { input, index } => self.gather_patches_backward(*input, index, g),
            Op::GatherPoints { input, centers } => self.gather_points_backward(*input, centers, g),
            Op::RowDot {
                keys,
                patches,
                scale,
            } => self.row_dot_backward(*keys, *patches, *scale, g),
            Op::WeightedSum { weights, values } => self.weighted_sum_backward(*weights, *values, g),
            Op::MaskedSoftmax { logits, valid } => {
                self.masked_softmax_backward(id, *logits, valid, g)
            }
            Op::ScatterAdd {
                base,
                values,
                centers,
            } => self.scatter_add_backward(*base, values, centers, g),
            Op::BceWithLogits {
                logits,
                targets,
                valid,
            } => self.bce_backward(*logits, targets, valid, g),
        }
        self.nodes[id].op = op;
    }

    /// `d(x, y)` is the local derivative given input `x` and output `y`.
    fn unary_backward(&mut self, a: Var, g: &[f64], d: impl Fn(f64, f64) -> f64, out: usize) {
        let x = self.nodes[a.0].value.data().to_vec();
        let y = self.nodes[out].value.data().to_vec();
        if let Some(s) = self.slot(a) {
            for i in 0..s.len() {
                s[i] += g[i] * d(x[i], y[i]);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, src: &[f64]) {
    match slot {
        Some(v) => axpy(v, src, 1.0),
        None => *slot = Some(src.to_vec()),
    }
}
