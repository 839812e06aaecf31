//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is an append-only list of nodes. Every op pushes exactly one
//! node holding its forward value plus whatever it needs for the backward
//! rule. [`Graph::backward`] walks the tape once, in reverse recording order.

use crate::error::{contract_err, shape_err, Result};
use crate::nn::conv::ConvGeom;
use crate::nn::norm::{BnCache, StatUpdate};
use crate::params::ParamId;
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    BatchNorm { x: Var, scale: Var, shift: Var, cache: BnCache<T> },
    LeakyRelu { x: Var, slope: T },
    Tanh(Var),
    Concat(Vec<Var>),
    Gram { x: Var, normalize: bool },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradient contributions produced by one node's backward rule.
pub(crate) type Contributions<T> = Vec<(Var, Vec<T>)>;

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    tracking: bool,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward rules.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), tracking: true, stat_updates: Vec::new() }
    }

    /// A graph that only evaluates: nothing requires a gradient and no
    /// backward caches are kept.
    pub fn inference() -> Self {
        Self { tracking: false, ..Self::new() }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: requires_grad && self.tracking, param });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Binds a copy of a stored parameter; its gradient is reported by
    /// [`Graph::param_grads`].
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        self.push_leaf(value.clone(), true, Some(id))
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.tracking && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, node)| {
            let id = node.param?;
            self.grads.get(i)?.as_ref().map(|g| (id, g))
        })
    }

    /// Sign of every input seen by a recorded leaky ReLU, in recording
    /// order. Two evaluations with equal patterns lie on the same linear
    /// piece of every activation.
    pub fn kink_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::LeakyRelu { x, .. } => Some(self.value(*x).data().iter().map(|v| *v >= T::zero())),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Smallest per-channel standard deviation (including eps) normalized
    /// by any batch-statistics batch norm. Small values mean the output
    /// swings sharply with its input.
    pub fn min_batch_std(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::BatchNorm { cache, .. } => cache.batch_std(),
                _ => None,
            })
            .flatten()
            .reduce(T::min)
    }

    pub(crate) fn push_stat_update(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    /// Batch-norm running statistics observed by train-mode forwards, in
    /// recording order.
    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires a
    /// gradient. Intermediate gradients are released as soon as their node
    /// has been processed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return contract_err(format!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_vec(node.value.shape(), g)?);
                continue;
            }
            for (v, contrib) in self.backprop_node(i, &g) {
                debug_assert!(v.0 < i, "tape order");
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            }
        }
        self.grads = leaf_grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T]) -> Contributions<T> {
        use crate::nn::{activation, concat, conv, loss, norm, pool};
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect()));
                out.push((*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect()));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), g, Trans::No, bv.data(), Trans::Yes, T::zero(), &mut da);
                    out.push((*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), av.data(), Trans::Yes, g, Trans::No, T::zero(), &mut db);
                    out.push((*b, db));
                }
            }
            Op::Conv2d { x, w, b, geom } => conv::backward(self, *x, *w, *b, geom, g, &mut out),
            Op::MaxPool { x, argmax } => pool::maxpool_backward(self.value(*x).len(), *x, argmax, g, &mut out),
            Op::GlobalAvgPool(x) => pool::global_avg_pool_backward(self.value(*x), *x, g, &mut out),
            Op::BatchNorm { x, scale, shift, cache } => norm::backward(self, *x, *scale, *shift, cache, g, &mut out),
            Op::LeakyRelu { x, slope } => activation::leaky_relu_backward(self.value(*x), *x, *slope, g, &mut out),
            Op::Tanh(x) => activation::tanh_backward(&node.value, *x, g, &mut out),
            Op::Concat(xs) => concat::backward(self, xs, g, &mut out),
            Op::Gram { x, normalize } => crate::gram::backward(self.value(*x), *x, *normalize, g, &mut out),
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                loss::softmax_cross_entropy_backward(*logits, probs, labels, g[0], &mut out)
            }
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("add: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("mul: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Sum of all elements as a shape-`[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            (sa, sb) => return shape_err(format!("matmul needs two matrices, got {sa:?} and {sb:?}")),
        };
        if k != k2 {
            return shape_err(format!("matmul inner extents differ: {m}x{k} times {k2}x{n}"));
        }
        let mut c = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), av.data(), Trans::No, bv.data(), Trans::No, T::zero(), &mut c);
        let value = Tensor::from_vec(&[m, n], c)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }
}
