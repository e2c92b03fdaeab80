//! Named parameter collections and layer-level helpers on top of the tape
//! primitives.
//!
//! Model code addresses parameters by dotted names ("stem.conv.w",
//! "rgb.s0.b1.c2.w", ...). A [`Binding`] lazily registers parameters as tape
//! leaves for one forward/backward pass and hands gradients back by name.

use std::collections::BTreeMap;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{sgd_step, Real, SgdState, Tape, Tensor, Var};

/// Batch-norm epsilon; fixed across the project.
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the batch statistic folded into the running estimate each
/// training step: r <- (1 - m) * r + m * batch.
pub const BN_MOMENTUM: f64 = 0.1;

/// One named parameter: value, trainability, and lazily created SGD state.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
    pub opt: Option<SgdState<T>>,
}

/// Named collection of tensors; houses a whole network including batch-norm
/// running statistics (stored as non-trainable entries).
#[derive(Clone, Debug, Default)]
pub struct ParameterSet<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> ParameterSet<T> {
        ParameterSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) {
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                trainable,
                opt: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter '{name}'")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Apply one SGD update to every name present in `grads`.
    pub fn apply_grads(
        &mut self,
        grads: &BTreeMap<String, Vec<T>>,
        alpha: T,
        momentum: T,
    ) -> Result<()> {
        for (name, grad) in grads {
            let param = self.get_mut(name)?;
            if !param.trainable {
                return Err(Error::InvalidArg(format!(
                    "gradient supplied for non-trainable parameter '{name}'"
                )));
            }
            let numel = param.value.numel();
            let state = match &mut param.opt {
                Some(s) => s,
                None => param.opt.insert(SgdState::new(momentum, numel)?),
            };
            sgd_step(&mut param.value, grad, alpha, state)?;
        }
        Ok(())
    }

    /// Bitwise equality of every value, optimizer state included.
    pub fn bitwise_eq(&self, other: &ParameterSet<T>) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries.iter().zip(other.entries.iter()).all(
            |((an, ap), (bn, bp))| {
                an == bn
                    && ap.value.shape() == bp.value.shape()
                    && ap
                        .value
                        .data()
                        .iter()
                        .zip(bp.value.data())
                        .all(|(x, y)| Real::to_f64(*x).to_bits() == Real::to_f64(*y).to_bits())
            },
        )
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::new();
        for (name, p) in &self.entries {
            out.insert(name, p.value.cast(), p.trainable);
        }
        out
    }
}

/// Per-pass view of a [`ParameterSet`] on a tape.
pub struct Binding<'p, T: Real> {
    pub params: &'p mut ParameterSet<T>,
    bound: HashMap<String, Var>,
    /// Bind trainable parameters with requires_grad.
    pub track_grads: bool,
    /// Batch-norm mode: batch statistics (true) or running estimates.
    pub train: bool,
    /// Fold batch statistics into the running estimates.
    pub update_running: bool,
}

impl<'p, T: Real> Binding<'p, T> {
    pub fn new(params: &'p mut ParameterSet<T>, track_grads: bool, train: bool) -> Binding<'p, T> {
        Binding {
            params,
            bound: HashMap::new(),
            track_grads,
            train,
            update_running: train,
        }
    }

    /// Binding for a frozen side of the bi-level step: no gradients, no
    /// running-stat mutation, but batch statistics are still used when
    /// `train` so both phases see the same normalization behavior.
    pub fn frozen(params: &'p mut ParameterSet<T>, train: bool) -> Binding<'p, T> {
        Binding {
            params,
            bound: HashMap::new(),
            track_grads: false,
            train,
            update_running: false,
        }
    }

    pub fn var(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = self.params.get(name)?;
        let requires_grad = param.trainable && self.track_grads;
        let v = tape.leaf(param.value.clone(), requires_grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Route a parameter name to a var already on the tape instead of the
    /// stored tensor. Gradient checks use this to differentiate layer
    /// helpers with respect to their weights.
    pub fn bind_existing(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    /// 2-D convolution layer `{prefix}.w` / `{prefix}.b`. `cdc_theta` > 0
    /// uses the central-difference decomposition
    /// y(p0) = sum_n w(pn) x(p0+pn) - theta * x(p0) * sum_n w(pn) + bias,
    /// which collapses to the vanilla convolution at theta = 0.
    pub fn conv(
        &mut self,
        tape: &mut Tape<T>,
        prefix: &str,
        x: Var,
        stride: usize,
        pad: usize,
        cdc_theta: T,
    ) -> Result<Var> {
        if cdc_theta < T::zero() || cdc_theta > T::one() {
            return Err(Error::InvalidArg(format!(
                "cdc_theta must be in [0,1], got {cdc_theta}"
            )));
        }
        let w = self.var(tape, &format!("{prefix}.w"))?;
        let bias_name = format!("{prefix}.b");
        let b = if self.params.get(&bias_name).is_ok() {
            Some(self.var(tape, &bias_name)?)
        } else {
            None
        };
        let main = tape.conv2d(x, w, b, stride, pad)?;
        if cdc_theta == T::zero() {
            return Ok(main);
        }
        let k = tape.value(w).shape()[2];
        if k % 2 == 0 || pad != k / 2 {
            return Err(Error::InvalidArg(format!(
                "central-difference convolution needs odd kernel with pad = k/2, got k={k}, pad={pad}"
            )));
        }
        let wsum = tape.kernel_spatial_sum(w)?;
        let center = tape.conv2d(x, wsum, None, stride, 0)?;
        let scaled = tape.scale(center, cdc_theta)?;
        tape.sub(main, scaled)
    }

    /// Batch-norm layer over `{prefix}.g/.b/.rm/.rv`.
    pub fn batchnorm(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.var(tape, &format!("{prefix}.g"))?;
        let beta = self.var(tape, &format!("{prefix}.b"))?;
        let rm = self.params.value(&format!("{prefix}.rm"))?.data().to_vec();
        let rv = self.params.value(&format!("{prefix}.rv"))?.data().to_vec();
        let out = tape.batchnorm(
            x,
            gamma,
            beta,
            &rm,
            &rv,
            T::from_f64(BN_EPS),
            self.train,
        )?;
        if self.train && self.update_running {
            let m = T::from_f64(BN_MOMENTUM);
            let one_m = T::one() - m;
            let rm_t = self.params.get_mut(&format!("{prefix}.rm"))?;
            for (r, &b) in rm_t.value.data_mut().iter_mut().zip(&out.batch_mean) {
                *r = one_m * *r + m * b;
            }
            let rv_t = self.params.get_mut(&format!("{prefix}.rv"))?;
            for (r, &b) in rv_t.value.data_mut().iter_mut().zip(&out.batch_var) {
                *r = one_m * *r + m * b;
            }
        }
        Ok(out.y)
    }

    /// Fully connected layer `{prefix}.w` / `{prefix}.b`.
    pub fn linear(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.var(tape, &format!("{prefix}.w"))?;
        let b = self.var(tape, &format!("{prefix}.b"))?;
        tape.linear(x, w, b)
    }

    /// Names bound during this pass, for gradient readback after backward.
    pub fn into_bound(self) -> HashMap<String, Var> {
        self.bound
    }
}

/// Read the gradients of the given bound parameters off a consumed tape.
pub fn collect_grads<T: Real>(
    tape: &Tape<T>,
    bound: &HashMap<String, Var>,
) -> BTreeMap<String, Vec<T>> {
    let mut out = BTreeMap::new();
    for (name, &var) in bound {
        if let Some(g) = tape.grad(var) {
            out.insert(name.clone(), g.to_vec());
        }
    }
    out
}

/// Standard normal via Box-Muller, driven by the caller's RNG stream.
pub fn randn<T: Real>(rng: &mut impl Rng) -> T {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    T::from_f64((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
}

/// Kaiming-style init for a conv kernel (out,in,k,k) plus zero bias.
pub fn init_conv<T: Real>(
    params: &mut ParameterSet<T>,
    prefix: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let data: Vec<T> = (0..out_c * in_c * k * k)
        .map(|_| {
            let z: T = randn(rng);
            z * T::from_f64(std)
        })
        .collect();
    params.insert(
        &format!("{prefix}.w"),
        Tensor::new(vec![out_c, in_c, k, k], data).unwrap(),
        true,
    );
    if bias {
        params.insert(&format!("{prefix}.b"), Tensor::zeros(&[out_c]), true);
    }
}

/// gamma = 1, beta = 0, running stats at the identity transform.
pub fn init_bn<T: Real>(params: &mut ParameterSet<T>, prefix: &str, c: usize) {
    params.insert(&format!("{prefix}.g"), Tensor::full(&[c], T::one()), true);
    params.insert(&format!("{prefix}.b"), Tensor::zeros(&[c]), true);
    params.insert(&format!("{prefix}.rm"), Tensor::zeros(&[c]), false);
    params.insert(&format!("{prefix}.rv"), Tensor::full(&[c], T::one()), false);
}

pub fn init_linear<T: Real>(
    params: &mut ParameterSet<T>,
    prefix: &str,
    in_f: usize,
    out_f: usize,
    rng: &mut impl Rng,
) {
    let std = (2.0 / in_f as f64).sqrt();
    let data: Vec<T> = (0..in_f * out_f)
        .map(|_| {
            let z: T = randn(rng);
            z * T::from_f64(std)
        })
        .collect();
    params.insert(
        &format!("{prefix}.w"),
        Tensor::new(vec![in_f, out_f], data).unwrap(),
        true,
    );
    params.insert(&format!("{prefix}.b"), Tensor::zeros(&[out_f]), true);
}
