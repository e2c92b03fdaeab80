use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

/// Recorded primitive with whatever its backward rule needs.
///
/// Inputs always precede the node on the tape, which is the topological-order
/// invariant the backward sweep relies on.
#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    MeanAll { x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    SoftmaxLast { x: Var },
    UpsampleNearest { x: Var, factor: usize },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    KernelSpatialSum { w: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, invstd: Vec<T>, train: bool },
    BceLoss { probs: Var, labels: Vec<u8>, floor: T },
    MseLoss { a: Var, b: Var },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
    pub is_leaf: bool,
    pub op: Op<T>,
}

/// Single-use record of one forward pass. Ops execute eagerly; `backward`
/// fills leaf gradients and consumes the tape.
pub struct Tape<T: Real> {
    id: u64,
    pub(crate) nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, true, Op::Leaf)
            .expect("leaf push cannot fail")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "var used on a foreign tape");
        &self.nodes[v.index].value
    }

    /// Gradient of a leaf after `backward`; `None` if untouched.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        assert_eq!(v.tape, self.id, "var used on a foreign tape");
        self.nodes[v.index].grad.as_deref()
    }

    pub(crate) fn check(&self, v: Var, context: &str) -> Result<()> {
        if v.tape != self.id {
            return Err(Error::Tape(format!("{context}: var is not on this tape")));
        }
        Ok(())
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        is_leaf: bool,
        op: Op<T>,
    ) -> Result<Var> {
        if self.consumed {
            return Err(Error::Tape(
                "tape already consumed by backward(); start a new tape".into(),
            ));
        }
        #[cfg(debug_assertions)]
        value.validate_finite("op output")?;
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            is_leaf,
            op,
        });
        Ok(Var {
            tape: self.id,
            index,
        })
    }

    pub(crate) fn requires_grad_of(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Reverse sweep from a scalar loss. Populates the grad of every
    /// reachable leaf with `requires_grad`; intermediate grads are dropped
    /// and the tape refuses further recording afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss, "backward")?;
        if self.consumed {
            return Err(Error::Tape("backward() called twice on one tape".into()));
        }
        if self.nodes[loss.index].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.index].requires_grad {
            // Nothing reachable is trainable; valid no-op.
            return Ok(());
        }
        self.nodes[loss.index].grad = Some(vec![T::one()]);
        for i in (0..=loss.index).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if self.nodes[i].is_leaf {
                continue; // keep the populated grad
            }
            let grad = self.nodes[i].grad.take().unwrap();
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let (before, at) = self.nodes.split_at_mut(i);
            let out_value = &at[0].value;
            backward_op(&op, out_value, &grad, before);
        }
        Ok(())
    }
}

/// Accumulate `delta` into the grad buffer of `v` if it participates in
/// differentiation.
pub(crate) fn accum<T: Real>(nodes: &mut [Node<T>], v: Var, delta: &[T]) {
    let node = &mut nodes[v.index];
    if !node.requires_grad {
        return;
    }
    let grad = node
        .grad
        .get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
    debug_assert_eq!(grad.len(), delta.len());
    for (g, d) in grad.iter_mut().zip(delta) {
        *g += *d;
    }
}

fn backward_op<T: Real>(op: &Op<T>, out_value: &Tensor<T>, grad: &[T], before: &mut [Node<T>]) {
    use super::ops_basic as basic;
    use super::ops_nn as nn;
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => basic::backward_add(*a, *b, grad, before),
        Op::Sub { a, b } => basic::backward_sub(*a, *b, grad, before),
        Op::Mul { a, b } => basic::backward_mul(*a, *b, grad, before),
        Op::Scale { x, c } => basic::backward_scale(*x, *c, grad, before),
        Op::MeanAll { x } => basic::backward_mean_all(*x, grad, before),
        Op::Concat { inputs, axis } => basic::backward_concat(inputs, *axis, grad, before),
        Op::Relu { x } => basic::backward_relu(*x, out_value, grad, before),
        Op::Sigmoid { x } => basic::backward_sigmoid(*x, out_value, grad, before),
        Op::SoftmaxLast { x } => basic::backward_softmax_last(*x, out_value, grad, before),
        Op::UpsampleNearest { x, factor } => {
            nn::backward_upsample_nearest(*x, *factor, out_value, grad, before)
        }
        Op::GlobalAvgPool { x } => nn::backward_global_avg_pool(*x, grad, before),
        Op::Linear { x, w, b } => nn::backward_linear(*x, *w, *b, grad, before),
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => nn::backward_conv2d(*x, *w, *b, *stride, *pad, out_value, grad, before),
        Op::KernelSpatialSum { w } => nn::backward_kernel_spatial_sum(*w, grad, before),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            invstd,
            train,
        } => nn::backward_batchnorm(*x, *gamma, *beta, mean, invstd, *train, grad, before),
        Op::BceLoss {
            probs,
            labels,
            floor,
        } => nn::backward_bce_loss(*probs, labels, *floor, grad, before),
        Op::MseLoss { a, b } => nn::backward_mse_loss(*a, *b, grad, before),
    }
}
