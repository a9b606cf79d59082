use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::conv;
use super::value::{broadcast_shapes, split_axis, Tensor};
use crate::error::{Error, Result};

type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    LogAddExp(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Sum(NodeId),
    SumAxis {
        input: NodeId,
        axis: usize,
    },
    LogSumExp {
        input: NodeId,
        axis: usize,
    },
    BroadcastTo(NodeId),
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        padding: usize,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for one reverse-mode pass.
///
/// Operations are appended in evaluation order, so the node list is always
/// topologically sorted. A tape supports exactly one [`Tape::backward`] call.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_leaf.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.by_leaf.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a gradient-tracking leaf (a trainable parameter).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    /// Registers a gradient-free constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records `op` producing `value`; the result tracks gradients only if
    /// some input does.
    fn record(&self, value: Tensor, inputs: &[NodeId], op: Op) -> Var<'_> {
        let requires_grad = inputs.iter().any(|&i| self.requires(i));
        self.push(
            value,
            requires_grad,
            if requires_grad { op } else { Op::Leaf },
        )
    }

    /// Computes gradients of the scalar `loss` with respect to every
    /// gradient-tracking leaf reachable from it. The tape is consumed.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(Error::TapeMismatch);
        }
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        if !root.requires_grad {
            return Err(Error::DetachedLoss);
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0)?);
        let mut by_leaf = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                by_leaf.insert(id, grad);
                continue;
            }
            for (input, contribution) in local_gradients(&nodes, node, &grad)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { by_leaf })
    }
}

fn local_gradients(nodes: &[Node], node: &Node, grad: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
    let val = |id: NodeId| &nodes[id].value;
    let out = &node.value;
    let grads = match node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![
            (a, grad.reduce_to(val(a).shape())),
            (b, grad.reduce_to(val(b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (a, grad.reduce_to(val(a).shape())),
            (b, grad.map(|g| -g).reduce_to(val(b).shape())),
        ],
        Op::Mul(a, b) => {
            let av = val(a).broadcast_to(out.shape())?;
            let bv = val(b).broadcast_to(out.shape())?;
            vec![
                (
                    a,
                    grad.zip_same(&bv, |g, y| g * y).reduce_to(val(a).shape()),
                ),
                (
                    b,
                    grad.zip_same(&av, |g, x| g * x).reduce_to(val(b).shape()),
                ),
            ]
        }
        Op::Div(a, b) => {
            let bv = val(b).broadcast_to(out.shape())?;
            let ga = grad.zip_same(&bv, |g, y| g / y);
            let gb = ga.zip_same(out, |g, q| -g * q);
            vec![
                (a, ga.reduce_to(val(a).shape())),
                (b, gb.reduce_to(val(b).shape())),
            ]
        }
        Op::LogAddExp(a, b) => {
            let av = val(a).broadcast_to(out.shape())?;
            let bv = val(b).broadcast_to(out.shape())?;
            let wa = av.zip_same(out, |x, o| (x - o).exp());
            let wb = bv.zip_same(out, |y, o| (y - o).exp());
            vec![
                (
                    a,
                    grad.zip_same(&wa, |g, w| g * w).reduce_to(val(a).shape()),
                ),
                (
                    b,
                    grad.zip_same(&wb, |g, w| g * w).reduce_to(val(b).shape()),
                ),
            ]
        }
        Op::Scale(a, c) => vec![(a, grad.map(|g| g * c))],
        Op::AddScalar(a) => vec![(a, grad.clone())],
        Op::MatMul(a, b) => vec![
            (a, grad.matmul(&val(b).transpose()?)?),
            (b, val(a).transpose()?.matmul(grad)?),
        ],
        Op::Transpose(a) => vec![(a, grad.transpose()?)],
        Op::Exp(a) => vec![(a, grad.zip_same(out, |g, e| g * e))],
        Op::Log(a) => vec![(a, grad.zip_same(val(a), |g, x| g / x))],
        Op::Sigmoid(a) => vec![(a, grad.zip_same(out, |g, s| g * s * (1.0 - s)))],
        Op::Tanh(a) => vec![(a, grad.zip_same(out, |g, t| g * (1.0 - t * t)))],
        Op::Relu(a) => vec![(
            a,
            grad.zip_same(val(a), |g, x| if x > 0.0 { g } else { 0.0 }),
        )],
        Op::Square(a) => vec![(a, grad.zip_same(val(a), |g, x| 2.0 * g * x))],
        Op::Sum(a) => {
            let g = grad.data()[0];
            vec![(a, Tensor::full(val(a).shape(), g)?)]
        }
        Op::SumAxis { input, axis } => {
            vec![(input, grad.expand_axis(val(input).shape(), axis))]
        }
        Op::LogSumExp { input, axis } => {
            let x = val(input);
            let g = grad.expand_axis(x.shape(), axis);
            let o = out.expand_axis(x.shape(), axis);
            let softmax = x.zip_same(&o, |x, o| (x - o).exp());
            vec![(input, g.zip_same(&softmax, |g, p| g * p))]
        }
        Op::BroadcastTo(a) => vec![(a, grad.reduce_to(val(a).shape()))],
        Op::Reshape(a) => vec![(a, grad.reshape(val(a).shape())?)],
        Op::Concat { ref inputs, axis } => {
            let (outer, _, inner) = split_axis(out.shape(), axis);
            let total = out.shape()[axis];
            let mut offset = 0;
            let mut parts = Vec::with_capacity(inputs.len());
            for &input in inputs {
                let shape = val(input).shape();
                let len = shape[axis];
                let mut data = Vec::with_capacity(val(input).len());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    data.extend_from_slice(&grad.data()[base..base + len * inner]);
                }
                parts.push((input, Tensor::new(shape.to_vec(), data)?));
                offset += len;
            }
            parts
        }
        Op::Slice { input, axis, start } => {
            let shape = val(input).shape();
            let (outer, total, inner) = split_axis(shape, axis);
            let len = out.shape()[axis];
            let mut data = vec![0.0; val(input).len()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * total + start) * inner;
                data[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
            }
            vec![(input, Tensor::new(shape.to_vec(), data)?)]
        }
        Op::Conv2d {
            input,
            weight,
            padding,
        } => {
            let (gx, gw) = conv::conv2d_backward(val(input), val(weight), grad, padding)?;
            vec![(input, gx), (weight, gw)]
        }
        Op::MaxPool2d { input, ref argmax } => {
            let mut data = vec![0.0; val(input).len()];
            for (&src, &g) in argmax.iter().zip(grad.data()) {
                data[src] += g;
            }
            vec![(input, Tensor::new(val(input).shape().to_vec(), data)?)]
        }
    };
    Ok(grads)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::TapeMismatch)
        }
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.record(value, &[self.id], op)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let shape =
                broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })?;
            let a = a.broadcast_to(&shape)?;
            let b = b.broadcast_to(&shape)?;
            a.zip_same(&b, f)
        };
        Ok(self.tape.record(value, &[self.id, other.id], op))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// Elementwise `log(exp(a) + exp(b))`, evaluated without overflow.
    pub fn logaddexp(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "logaddexp",
            |a, b| {
                let m = a.max(b);
                if m == f64::NEG_INFINITY {
                    m
                } else {
                    m + ((a - m).exp() + (b - m).exp()).ln()
                }
            },
            Op::LogAddExp(self.id, other.id),
        )
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = self.value().matmul(&other.value())?;
        Ok(self
            .tape
            .record(value, &[self.id, other.id], Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = self.value().transpose()?;
        Ok(self.tape.record(value, &[self.id], Op::Transpose(self.id)))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        if let Some(bad) = self
            .value()
            .data()
            .iter()
            .find(|&&x| x <= 0.0 || x.is_nan())
        {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive operand {bad}"),
            });
        }
        Ok(self.unary(f64::ln, Op::Log(self.id)))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value().data().iter().sum());
        self.tape.record(value, &[self.id], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { op, axis, shape });
        }
        Ok(())
    }

    /// Sum along `axis`. With `keepdim` the axis is kept with extent 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        self.check_axis("sum_axis", axis)?;
        let value = self.value().sum_axis(axis, keepdim);
        Ok(self.tape.record(
            value,
            &[self.id],
            Op::SumAxis {
                input: self.id,
                axis,
            },
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        self.check_axis("mean_axis", axis)?;
        let n = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n))
    }

    /// Numerically stable `log(sum(exp(x)))` along `axis`.
    pub fn logsumexp(&self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        self.check_axis("logsumexp", axis)?;
        let value = self.value().logsumexp_axis(axis, keepdim);
        Ok(self.tape.record(
            value,
            &[self.id],
            Op::LogSumExp {
                input: self.id,
                axis,
            },
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().broadcast_to(shape)?;
        Ok(self
            .tape
            .record(value, &[self.id], Op::BroadcastTo(self.id)))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.record(value, &[self.id], Op::Reshape(self.id)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: Vec::new(),
            reason: "concat of zero tensors".into(),
        })?;
        first.check_axis("concat", axis)?;
        let first_shape = first.shape();
        let mut total = 0;
        for part in parts {
            first.same_tape(part)?;
            let shape = part.shape();
            let compatible = shape.len() == first_shape.len()
                && shape
                    .iter()
                    .zip(&first_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first_shape,
                    rhs: shape,
                });
            }
            total += shape[axis];
        }
        let (outer, _, inner) = split_axis(&first_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for part in parts {
                let v = part.value();
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first_shape;
        shape[axis] = total;
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::new(shape, data)?;
        Ok(first.tape.record(
            value,
            &ids,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        self.check_axis("slice", axis)?;
        let shape = self.shape();
        if start >= end || end > shape[axis] {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("slice {start}..{end} out of range on axis {axis}"),
            });
        }
        let (outer, total, inner) = split_axis(&shape, axis);
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let v = self.value();
            for o in 0..outer {
                let base = (o * total + start) * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.tape.record(
            value,
            &[self.id],
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// Value-identical copy that contributes no gradient to `self`.
    pub fn stop_gradient(&self) -> Var<'t> {
        let value = self.value().clone();
        self.tape.push(value, false, Op::Leaf)
    }

    /// 2-D convolution, stride 1, zero padding on each side.
    /// Input `[N, C, H, W]`, weight `[O, C, KH, KW]`.
    pub fn conv2d(&self, weight: Var<'t>, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        let value = conv::conv2d_forward(&self.value(), &weight.value(), padding)?;
        Ok(self.tape.record(
            value,
            &[self.id, weight.id],
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                padding,
            },
        ))
    }

    /// Non-overlapping max pooling with a square window on `[N, C, H, W]`.
    pub fn max_pool2d(&self, size: usize) -> Result<Var<'t>> {
        let (value, argmax) = conv::max_pool2d_forward(&self.value(), size)?;
        Ok(self.tape.record(
            value,
            &[self.id],
            Op::MaxPool2d {
                input: self.id,
                argmax,
            },
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
