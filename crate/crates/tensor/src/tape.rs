//! Operation tape and the reverse sweep.
//!
//! Every op appends one node holding its output value. Inputs always have
//! smaller indices than the node consuming them, so a single reverse pass
//! over the node list is a valid topological traversal.

use crate::error::{Result, TensorError};
use crate::ops::conv::ConvGeom;
use crate::ops::{conv, elementwise, linear, loss, norm, pool, shape as shape_ops};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: S },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Conv { x: Var, k: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, ctx: norm::BnContext<S> },
    AdaptivePool { x: Var, len_in: usize, target: usize },
    MeanTrailing { x: Var, inner: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Select { x: Var, index: usize },
    Stack(Vec<Var>),
    Concat(Vec<Var>),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    Sum(Var),
    Mean(Var),
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<S>,
}

/// Records executed ops for one forward pass; confined to a single thread.
pub struct Tape<S> {
    pub(crate) nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient will be collected by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the backward root with respect to a leaf, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<S>> {
        self.grad(v).map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively over
    /// every use of a node. A tape supports exactly one sweep.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Adds `delta` into `grad[v][offset..offset + delta.len()]`.
    fn acc_range(&mut self, v: Var, offset: usize, delta: &[S]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
        for (a, &d) in g[offset..offset + delta.len()].iter_mut().zip(delta) {
            *a += d;
        }
    }

    fn propagate(&mut self, i: usize, g: &[S]) {
        // Temporarily take the op so node values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, g.to_vec());
                self.acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(*a, g.to_vec());
                self.acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = elementwise::mul_grad(g, self.value(*b).data());
                    self.acc(*a, d);
                }
                if self.rg(*b) {
                    let d = elementwise::mul_grad(g, self.value(*a).data());
                    self.acc(*b, d);
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.acc(*x, g.iter().map(|&d| d * s).collect());
            }
            Op::Relu(x) => {
                let d = elementwise::relu_grad(g, self.nodes[i].value.data());
                self.acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = elementwise::sigmoid_grad(g, self.nodes[i].value.data());
                self.acc(*x, d);
            }
            Op::Tanh(x) => {
                let d = elementwise::tanh_grad(g, self.nodes[i].value.data());
                self.acc(*x, d);
            }
            Op::Linear { x, w, b, rows, inp, out } => {
                let (rows, inp, out) = (*rows, *inp, *out);
                if self.rg(*x) {
                    let d = linear::grad_input(g, self.value(*w).data(), rows, inp, out);
                    self.acc(*x, d);
                }
                if self.rg(*w) {
                    let d = linear::grad_weight(g, self.value(*x).data(), rows, inp, out);
                    self.acc(*w, d);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let d = linear::grad_bias(g, rows, out);
                        self.acc(*b, d);
                    }
                }
            }
            Op::Conv { x, k, b, geom } => {
                let want_x = self.rg(*x);
                let want_k = self.rg(*k);
                let (dx, dk) = conv::backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    want_x,
                    want_k,
                );
                if let Some(dx) = dx {
                    self.acc(*x, dx);
                }
                if let Some(dk) = dk {
                    self.acc(*k, dk);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let d = conv::grad_bias(geom, g);
                        self.acc(*b, d);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, ctx } => {
                let grads = norm::backward(
                    ctx,
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    g,
                    self.rg(*x),
                );
                if let Some(dx) = grads.input {
                    self.acc(*x, dx);
                }
                self.acc(*gamma, grads.gamma);
                self.acc(*beta, grads.beta);
            }
            Op::AdaptivePool { x, len_in, target } => {
                let d = pool::adaptive_backward(g, *len_in, *target);
                self.acc(*x, d);
            }
            Op::MeanTrailing { x, inner } => {
                let inner = *inner;
                let scale = S::one() / S::of(inner as f64);
                let d = g.iter().flat_map(|&v| std::iter::repeat_n(v * scale, inner)).collect();
                self.acc(*x, d);
            }
            Op::Permute { x, perm } => {
                let inv = shape_ops::inverse_perm(perm);
                let out_shape = self.nodes[i].value.shape().to_vec();
                let d = shape_ops::permute_data(g, &out_shape, &inv);
                self.acc(*x, d);
            }
            Op::Reshape(x) => self.acc(*x, g.to_vec()),
            Op::Select { x, index } => {
                let n = g.len();
                self.acc_range(*x, index * n, g);
            }
            Op::Stack(parts) => {
                let n = g.len() / parts.len();
                for (j, p) in parts.iter().enumerate() {
                    if self.rg(*p) {
                        self.acc(*p, g[j * n..(j + 1) * n].to_vec());
                    }
                }
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> =
                    parts.iter().map(|p| *self.shape(*p).last().unwrap()).collect();
                let split = shape_ops::split_last(g, &widths);
                for (p, d) in parts.iter().zip(split) {
                    self.acc(*p, d);
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let d = loss::softmax_ce_grad(g[0], probs, labels);
                self.acc(*logits, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.acc(*x, vec![g[0] / S::of(n as f64); n]);
            }
        }
        self.nodes[i].op = op;
    }
}
