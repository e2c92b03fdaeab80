//! Elementwise, reduction, concat, and activation primitives.
//!
//! Broadcasting is deliberately minimal: operand shapes must match exactly,
//! or one operand is a single-element tensor broadcast against the other.

use crate::error::{Error, Result};
use crate::tensor::tape::{accum, Node, Op, Tape, Var};
use crate::tensor::{Real, Tensor};

fn broadcast_shapes(a: &[usize], an: usize, b: &[usize], bn: usize) -> Result<Vec<usize>> {
    if a == b {
        Ok(a.to_vec())
    } else if an == 1 {
        Ok(b.to_vec())
    } else if bn == 1 {
        Ok(a.to_vec())
    } else {
        Err(Error::Shape(format!(
            "incompatible shapes {a:?} and {b:?} (exact match or scalar broadcast only)"
        )))
    }
}

impl<T: Real> Tape<T> {
    fn binary_values(&self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, usize, usize)> {
        self.check(a, name)?;
        self.check(b, name)?;
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shapes(av.shape(), av.numel(), bv.shape(), bv.numel())?;
        Ok((shape, av.numel(), bv.numel()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, an, bn) = self.binary_values(a, b, "add")?;
        let numel: usize = shape.iter().product();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            out.push(av[if an == 1 { 0 } else { i }] + bv[if bn == 1 { 0 } else { i }]);
        }
        let rg = self.requires_grad_of(a) || self.requires_grad_of(b);
        self.push(Tensor::new(shape, out)?, rg, false, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, an, bn) = self.binary_values(a, b, "sub")?;
        let numel: usize = shape.iter().product();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            out.push(av[if an == 1 { 0 } else { i }] - bv[if bn == 1 { 0 } else { i }]);
        }
        let rg = self.requires_grad_of(a) || self.requires_grad_of(b);
        self.push(Tensor::new(shape, out)?, rg, false, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, an, bn) = self.binary_values(a, b, "mul")?;
        let numel: usize = shape.iter().product();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            out.push(av[if an == 1 { 0 } else { i }] * bv[if bn == 1 { 0 } else { i }]);
        }
        let rg = self.requires_grad_of(a) || self.requires_grad_of(b);
        self.push(Tensor::new(shape, out)?, rg, false, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(x, "scale")?;
        let out = self.value(x).map(|v| v * c);
        let rg = self.requires_grad_of(x);
        self.push(out, rg, false, Op::Scale { x, c })
    }

    /// Mean over every element, yielding a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.check(x, "mean_all")?;
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.requires_grad_of(x);
        self.push(out, rg, false, Op::MeanAll { x })
    }

    /// Concatenation along axis 1 (the channel axis for NCHW, the feature
    /// axis for NF). All other dimensions must agree.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArg("concat of zero tensors".into()));
        }
        for &v in inputs {
            self.check(v, "concat_channels")?;
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if first.len() < 2 {
            return Err(Error::Shape(format!(
                "concat_channels needs rank >= 2, got {first:?}"
            )));
        }
        let mut total_c = 0usize;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s[0] != first[0]
                || s[2..] != first[2..]
            {
                return Err(Error::Shape(format!(
                    "concat_channels: shape {s:?} incompatible with {first:?}"
                )));
            }
            total_c += s[1];
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut shape = first.clone();
        shape[1] = total_c;
        let mut out = vec![T::zero(); outer * total_c * inner];
        for n in 0..outer {
            let mut off = 0usize;
            for &v in inputs {
                let val = self.value(v);
                let c = val.shape()[1];
                let src = &val.data()[n * c * inner..(n + 1) * c * inner];
                out[(n * total_c + off) * inner..(n * total_c + off + c) * inner]
                    .copy_from_slice(src);
                off += c;
            }
        }
        let rg = inputs.iter().any(|&v| self.requires_grad_of(v));
        self.push(
            Tensor::new(shape, out)?,
            rg,
            false,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis: 1,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x, "relu")?;
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires_grad_of(x);
        self.push(out, rg, false, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x, "sigmoid")?;
        let one = T::one();
        let out = self.value(x).map(|v| one / (one + (-v).exp()));
        let rg = self.requires_grad_of(x);
        self.push(out, rg, false, Op::Sigmoid { x })
    }

    /// Softmax along the final axis; rows sum to 1.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        self.check(x, "softmax_last")?;
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let cols = *shape.last().unwrap();
        let rows = xv.numel() / cols;
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o = *o / sum;
            }
        }
        let rg = self.requires_grad_of(x);
        self.push(Tensor::new(shape, out)?, rg, false, Op::SoftmaxLast { x })
    }
}

fn spread<T: Real>(grad: &[T], numel: usize) -> Vec<T> {
    // Gradient of broadcasting a scalar: sum of upstream.
    if numel == 1 && grad.len() != 1 {
        let mut acc = T::zero();
        for &g in grad {
            acc += g;
        }
        vec![acc]
    } else {
        grad.to_vec()
    }
}

pub(crate) fn backward_add<T: Real>(a: Var, b: Var, grad: &[T], nodes: &mut [Node<T>]) {
    let (an, bn) = (nodes[a.index].value.numel(), nodes[b.index].value.numel());
    let da = spread(grad, an);
    let db = spread(grad, bn);
    accum(nodes, a, &da);
    accum(nodes, b, &db);
}

pub(crate) fn backward_sub<T: Real>(a: Var, b: Var, grad: &[T], nodes: &mut [Node<T>]) {
    let (an, bn) = (nodes[a.index].value.numel(), nodes[b.index].value.numel());
    let da = spread(grad, an);
    let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
    let db = spread(&neg, bn);
    accum(nodes, a, &da);
    accum(nodes, b, &db);
}

pub(crate) fn backward_mul<T: Real>(a: Var, b: Var, grad: &[T], nodes: &mut [Node<T>]) {
    let av = nodes[a.index].value.data().to_vec();
    let bv = nodes[b.index].value.data().to_vec();
    let (an, bn) = (av.len(), bv.len());
    let n = grad.len();
    let mut da_full = Vec::with_capacity(n);
    let mut db_full = Vec::with_capacity(n);
    for i in 0..n {
        da_full.push(grad[i] * bv[if bn == 1 { 0 } else { i }]);
        db_full.push(grad[i] * av[if an == 1 { 0 } else { i }]);
    }
    let da = spread(&da_full, an);
    let db = spread(&db_full, bn);
    accum(nodes, a, &da);
    accum(nodes, b, &db);
}

pub(crate) fn backward_scale<T: Real>(x: Var, c: T, grad: &[T], nodes: &mut [Node<T>]) {
    let dx: Vec<T> = grad.iter().map(|&g| g * c).collect();
    accum(nodes, x, &dx);
}

pub(crate) fn backward_mean_all<T: Real>(x: Var, grad: &[T], nodes: &mut [Node<T>]) {
    let numel = nodes[x.index].value.numel();
    let g = grad[0] / T::from_f64(numel as f64);
    let dx = vec![g; numel];
    accum(nodes, x, &dx);
}

pub(crate) fn backward_concat<T: Real>(
    inputs: &[Var],
    _axis: usize,
    grad: &[T],
    nodes: &mut [Node<T>],
) {
    let first = nodes[inputs[0].index].value.shape().to_vec();
    let outer = first[0];
    let inner: usize = first[2..].iter().product();
    let total_c: usize = inputs
        .iter()
        .map(|&v| nodes[v.index].value.shape()[1])
        .sum();
    let mut off = 0usize;
    for &v in inputs {
        let c = nodes[v.index].value.shape()[1];
        let mut dv = vec![T::zero(); outer * c * inner];
        for n in 0..outer {
            dv[n * c * inner..(n + 1) * c * inner].copy_from_slice(
                &grad[(n * total_c + off) * inner..(n * total_c + off + c) * inner],
            );
        }
        accum(nodes, v, &dv);
        off += c;
    }
}

pub(crate) fn backward_relu<T: Real>(x: Var, out: &Tensor<T>, grad: &[T], nodes: &mut [Node<T>]) {
    let dx: Vec<T> = out
        .data()
        .iter()
        .zip(grad)
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    accum(nodes, x, &dx);
}

pub(crate) fn backward_sigmoid<T: Real>(
    x: Var,
    out: &Tensor<T>,
    grad: &[T],
    nodes: &mut [Node<T>],
) {
    let one = T::one();
    let dx: Vec<T> = out
        .data()
        .iter()
        .zip(grad)
        .map(|(&y, &g)| g * y * (one - y))
        .collect();
    accum(nodes, x, &dx);
}

pub(crate) fn backward_softmax_last<T: Real>(
    x: Var,
    out: &Tensor<T>,
    grad: &[T],
    nodes: &mut [Node<T>],
) {
    let cols = *out.shape().last().unwrap();
    let rows = out.numel() / cols;
    let y = out.data();
    let mut dx = vec![T::zero(); out.numel()];
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        let mut dot = T::zero();
        for i in span.clone() {
            dot += grad[i] * y[i];
        }
        for i in span {
            dx[i] = y[i] * (grad[i] - dot);
        }
    }
    accum(nodes, x, &dx);
}
