//! Neural-network primitives recorded on the tape.
//!
//! Convolution is im2col + GEMM per sample; backward reuses the same column
//! buffers. Weight/input gradients are skipped when the corresponding leaf
//! does not require them, which is what makes the frozen passes of the
//! bi-level trainer cheap.

use crate::error::{Error, Result};
use crate::tensor::tape::{accum, Node, Op, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to this floor before the log inside the BCE
/// loss, so saturated sigmoids cannot produce -inf. Documented so reported
/// loss values are reproducible.
pub const BCE_LOG_FLOOR: f64 = 1e-12;

/// Result of a batch-norm forward: the output plus the batch statistics the
/// caller may fold into its running estimates.
pub struct BnOut<T> {
    pub y: Var,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    // floor((input + 2*pad - kernel) / stride) + 1, erroring when that is
    // not a positive integer
    let span = input + 2 * pad;
    if span < kernel {
        return Err(Error::Shape(format!(
            "convolution kernel {kernel} exceeds padded input {span}"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    // col is (c*kh*kw) x (ho*wo), row-major, pre-zeroed.
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    let out_row = &mut dst[oh * wo..(oh + 1) * wo];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            *o = src_row[iw as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst_row[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Standard cross-correlation with zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.check(x, "conv2d")?;
        self.check(w, "conv2d")?;
        if stride == 0 {
            return Err(Error::InvalidArg("conv2d stride must be positive".into()));
        }
        let (n, c, h, wdim) = self.value(x).dims4("conv2d input")?;
        let (o, ci, kh, kw) = self.value(w).dims4("conv2d weight")?;
        if ci != c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {ci}"
            )));
        }
        if let Some(bv) = b {
            self.check(bv, "conv2d")?;
            if self.value(bv).shape() != [o] {
                return Err(Error::Shape(format!(
                    "conv2d bias shape {:?} does not match {o} output channels",
                    self.value(bv).shape()
                )));
            }
        }
        let ho = conv_out_dim(h, kh, stride, pad)?;
        let wo = conv_out_dim(wdim, kw, stride, pad)?;
        let k = c * kh * kw;
        let spatial = ho * wo;
        // 1x1 stride-1 unpadded kernels are plain channel mixes: the input
        // itself already is the column matrix
        let is_pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let mut out = vec![T::zero(); n * o * spatial];
        let mut col = if is_pointwise {
            Vec::new()
        } else {
            vec![T::zero(); k * spatial]
        };
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for ni in 0..n {
            let xs = &xd[ni * c * h * wdim..(ni + 1) * c * h * wdim];
            let col_ptr = if is_pointwise {
                xs.as_ptr()
            } else {
                col.iter_mut().for_each(|v| *v = T::zero());
                im2col(xs, c, h, wdim, kh, kw, stride, pad, ho, wo, &mut col);
                col.as_ptr()
            };
            unsafe {
                T::gemm(
                    o,
                    k,
                    spatial,
                    T::one(),
                    wd.as_ptr(),
                    k as isize,
                    1,
                    col_ptr,
                    spatial as isize,
                    1,
                    T::zero(),
                    out[ni * o * spatial..].as_mut_ptr(),
                    spatial as isize,
                    1,
                );
            }
        }
        if let Some(bv) = b {
            let bd = self.value(bv).data().to_vec();
            for ni in 0..n {
                for (oi, &bias) in bd.iter().enumerate() {
                    for v in &mut out[(ni * o + oi) * spatial..(ni * o + oi + 1) * spatial] {
                        *v += bias;
                    }
                }
            }
        }
        let rg = self.requires_grad_of(x)
            || self.requires_grad_of(w)
            || b.map(|bv| self.requires_grad_of(bv)).unwrap_or(false);
        self.push(
            Tensor::new(vec![n, o, ho, wo], out)?,
            rg,
            false,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Sum of each kernel over its spatial extent: (O,I,kh,kw) -> (O,I,1,1).
    /// Used by the central-difference decomposition.
    pub fn kernel_spatial_sum(&mut self, w: Var) -> Result<Var> {
        self.check(w, "kernel_spatial_sum")?;
        let (o, i, kh, kw) = self.value(w).dims4("kernel_spatial_sum")?;
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); o * i];
        for (oi, chunk) in wd.chunks(kh * kw).enumerate() {
            let mut acc = T::zero();
            for &v in chunk {
                acc += v;
            }
            out[oi] = acc;
        }
        let rg = self.requires_grad_of(w);
        self.push(
            Tensor::new(vec![o, i, 1, 1], out)?,
            rg,
            false,
            Op::KernelSpatialSum { w },
        )
    }

    /// Batch normalization over (N,H,W) per channel. `train` normalizes with
    /// batch statistics and reports them; eval uses the running estimates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
        train: bool,
    ) -> Result<BnOut<T>> {
        self.check(x, "batchnorm")?;
        self.check(gamma, "batchnorm")?;
        self.check(beta, "batchnorm")?;
        let (n, c, h, w) = self.value(x).dims4("batchnorm input")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!(
                "batchnorm gamma/beta must have shape [{c}]"
            )));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!(
                "batchnorm running stats must have length {c}"
            )));
        }
        if running_var.iter().any(|v| *v < T::zero()) {
            return Err(Error::InvalidArg("batchnorm running_var entry < 0".into()));
        }
        let m = n * h * w;
        if train && m <= 1 {
            return Err(Error::InvalidArg(
                "batchnorm train mode needs more than one element per channel".into(),
            ));
        }
        let xd = self.value(x).data();
        let plane = h * w;
        let (mean, var) = if train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_m = T::one() / T::from_f64(m as f64);
            for ci in 0..c {
                let mut acc = T::zero();
                for ni in 0..n {
                    for &v in &xd[(ni * c + ci) * plane..(ni * c + ci + 1) * plane] {
                        acc += v;
                    }
                }
                mean[ci] = acc * inv_m;
                let mut acc2 = T::zero();
                for ni in 0..n {
                    for &v in &xd[(ni * c + ci) * plane..(ni * c + ci + 1) * plane] {
                        let d = v - mean[ci];
                        acc2 += d * d;
                    }
                }
                var[ci] = acc2 * inv_m;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let span = (ni * c + ci) * plane..(ni * c + ci + 1) * plane;
                let (mu, is, g, be) = (mean[ci], invstd[ci], gd[ci], bd[ci]);
                for (o, &v) in out[span.clone()].iter_mut().zip(&xd[span]) {
                    *o = (v - mu) * is * g + be;
                }
            }
        }
        let rg = self.requires_grad_of(x)
            || self.requires_grad_of(gamma)
            || self.requires_grad_of(beta);
        let y = self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            rg,
            false,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                invstd,
                train,
            },
        )?;
        Ok(BnOut {
            y,
            batch_mean: mean,
            batch_var: var,
        })
    }

    /// Each pixel replicated into a factor x factor block.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check(x, "upsample_nearest")?;
        if factor < 1 {
            return Err(Error::InvalidArg("upsample factor must be >= 1".into()));
        }
        let (n, c, h, w) = self.value(x).dims4("upsample_nearest input")?;
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for ih in 0..h {
                for iw in 0..w {
                    let v = src[ih * w + iw];
                    for fi in 0..factor {
                        let row = (ih * factor + fi) * ow + iw * factor;
                        for o in &mut dst[row..row + factor] {
                            *o = v;
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad_of(x);
        self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            rg,
            false,
            Op::UpsampleNearest { x, factor },
        )
    }

    /// (N,C,H,W) -> (N,C): arithmetic mean over the spatial extent.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x, "global_avg_pool")?;
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool input")?;
        let xd = self.value(x).data();
        let inv = T::one() / T::from_f64((h * w) as f64);
        let mut out = vec![T::zero(); n * c];
        for (nc, chunk) in xd.chunks(h * w).enumerate() {
            let mut acc = T::zero();
            for &v in chunk {
                acc += v;
            }
            out[nc] = acc * inv;
        }
        let rg = self.requires_grad_of(x);
        self.push(
            Tensor::new(vec![n, c], out)?,
            rg,
            false,
            Op::GlobalAvgPool { x },
        )
    }

    /// Affine map: (N,F) x (F,G) + (G) -> (N,G).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x, "linear")?;
        self.check(w, "linear")?;
        self.check(b, "linear")?;
        let (n, f) = self.value(x).dims2("linear input")?;
        let (fw, g) = self.value(w).dims2("linear weight")?;
        if fw != f {
            return Err(Error::Shape(format!(
                "linear: input features {f} do not match weight rows {fw}"
            )));
        }
        if self.value(b).shape() != [g] {
            return Err(Error::Shape(format!("linear bias must have shape [{g}]")));
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); n * g];
        unsafe {
            T::gemm(
                n,
                f,
                g,
                T::one(),
                xd.as_ptr(),
                f as isize,
                1,
                wd.as_ptr(),
                g as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                g as isize,
                1,
            );
        }
        for row in out.chunks_mut(g) {
            for (o, &bias) in row.iter_mut().zip(bd) {
                *o += bias;
            }
        }
        let rg = self.requires_grad_of(x)
            || self.requires_grad_of(w)
            || self.requires_grad_of(b);
        self.push(Tensor::new(vec![n, g], out)?, rg, false, Op::Linear { x, w, b })
    }

    /// Binary cross entropy on post-softmax probabilities:
    /// -mean(log p[true class]), log-clamped at [`BCE_LOG_FLOOR`].
    pub fn bce_loss(&mut self, probs: Var, labels: &[u8]) -> Result<Var> {
        self.check(probs, "bce_loss")?;
        let (n, two) = self.value(probs).dims2("bce_loss probs")?;
        if two != 2 {
            return Err(Error::Shape(format!(
                "bce_loss expects (N,2) probabilities, got (N,{two})"
            )));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "bce_loss: {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().position(|&l| l > 1) {
            return Err(Error::InvalidArg(format!(
                "bce_loss: label {} at index {bad} is outside {{0,1}}",
                labels[bad]
            )));
        }
        let floor = T::from_f64(BCE_LOG_FLOOR);
        let pd = self.value(probs).data();
        let mut acc = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let p = pd[i * 2 + l as usize].max(floor);
            acc -= p.ln();
        }
        let loss = acc / T::from_f64(n as f64);
        let rg = self.requires_grad_of(probs);
        self.push(
            Tensor::scalar(loss),
            rg,
            false,
            Op::BceLoss {
                probs,
                labels: labels.to_vec(),
                floor,
            },
        )
    }

    /// Mean squared elementwise error between two same-shape tensors.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "mse_loss")?;
        self.check(b, "mse_loss")?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mse_loss shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut acc = T::zero();
        for (&x, &y) in ad.iter().zip(bd) {
            let d = x - y;
            acc += d * d;
        }
        let loss = acc / T::from_f64(ad.len() as f64);
        let rg = self.requires_grad_of(a) || self.requires_grad_of(b);
        self.push(Tensor::scalar(loss), rg, false, Op::MseLoss { a, b })
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_conv2d<T: Real>(
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    out: &Tensor<T>,
    grad: &[T],
    nodes: &mut [Node<T>],
) {
    let (n, c, h, wdim) = nodes[x.index].value.dims4("conv2d bwd x").unwrap();
    let (o, _, kh, kw) = nodes[w.index].value.dims4("conv2d bwd w").unwrap();
    let (_, _, ho, wo) = out.dims4("conv2d bwd out").unwrap();
    let k = c * kh * kw;
    let spatial = ho * wo;
    let need_dx = nodes[x.index].requires_grad;
    let need_dw = nodes[w.index].requires_grad;

    if let Some(bv) = b {
        if nodes[bv.index].requires_grad {
            let mut db = vec![T::zero(); o];
            for ni in 0..n {
                for oi in 0..o {
                    for &g in &grad[(ni * o + oi) * spatial..(ni * o + oi + 1) * spatial] {
                        db[oi] += g;
                    }
                }
            }
            accum(nodes, bv, &db);
        }
    }
    if !need_dx && !need_dw {
        return;
    }
    let xd = nodes[x.index].value.data().to_vec();
    let wd = nodes[w.index].value.data().to_vec();
    let mut dx = if need_dx {
        vec![T::zero(); xd.len()]
    } else {
        Vec::new()
    };
    let mut dw = if need_dw {
        vec![T::zero(); wd.len()]
    } else {
        Vec::new()
    };
    // same pointwise shortcut as the forward pass: the input is the column
    // matrix and col2im degenerates to a copy
    let is_pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    let mut col = if is_pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * spatial]
    };
    let mut tmp = vec![T::zero(); k * spatial];
    for ni in 0..n {
        let gout = &grad[ni * o * spatial..(ni + 1) * o * spatial];
        if need_dw {
            let xs = &xd[ni * c * h * wdim..(ni + 1) * c * h * wdim];
            let col_ptr = if is_pointwise {
                xs.as_ptr()
            } else {
                col.iter_mut().for_each(|v| *v = T::zero());
                im2col(xs, c, h, wdim, kh, kw, stride, pad, ho, wo, &mut col);
                col.as_ptr()
            };
            unsafe {
                // dw(OxK) += gout(OxS) * col^T(SxK)
                T::gemm(
                    o,
                    spatial,
                    k,
                    T::one(),
                    gout.as_ptr(),
                    spatial as isize,
                    1,
                    col_ptr,
                    1,
                    spatial as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if need_dx {
            let dst = &mut dx[ni * c * h * wdim..(ni + 1) * c * h * wdim];
            let tmp_ptr = if is_pointwise {
                dst.as_mut_ptr()
            } else {
                tmp.as_mut_ptr()
            };
            unsafe {
                // tmp(KxS) = w^T(KxO) * gout(OxS)
                T::gemm(
                    k,
                    o,
                    spatial,
                    T::one(),
                    wd.as_ptr(),
                    1,
                    k as isize,
                    gout.as_ptr(),
                    spatial as isize,
                    1,
                    T::zero(),
                    tmp_ptr,
                    spatial as isize,
                    1,
                );
            }
            if !is_pointwise {
                col2im_add(
                    &tmp, c, h, wdim, kh, kw, stride, pad, ho, wo, dst,
                );
            }
        }
    }
    if need_dx {
        accum(nodes, x, &dx);
    }
    if need_dw {
        accum(nodes, w, &dw);
    }
}

pub(crate) fn backward_kernel_spatial_sum<T: Real>(w: Var, grad: &[T], nodes: &mut [Node<T>]) {
    let shape = nodes[w.index].value.shape().to_vec();
    let spatial = shape[2] * shape[3];
    let mut dw = vec![T::zero(); nodes[w.index].value.numel()];
    for (oi, &g) in grad.iter().enumerate() {
        for v in &mut dw[oi * spatial..(oi + 1) * spatial] {
            *v = g;
        }
    }
    accum(nodes, w, &dw);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_batchnorm<T: Real>(
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[T],
    invstd: &[T],
    train: bool,
    grad: &[T],
    nodes: &mut [Node<T>],
) {
    let (n, c, h, w) = nodes[x.index].value.dims4("batchnorm bwd").unwrap();
    let plane = h * w;
    let m = T::from_f64((n * plane) as f64);
    let xd = nodes[x.index].value.data().to_vec();
    let gd = nodes[gamma.index].value.data().to_vec();

    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let span = (ni * c + ci) * plane..(ni * c + ci + 1) * plane;
            for (i, &g) in span.clone().zip(&grad[span.clone()]) {
                sum_dy[ci] += g;
                sum_dy_xhat[ci] += g * (xd[i] - mean[ci]) * invstd[ci];
            }
        }
    }
    if nodes[beta.index].requires_grad {
        accum(nodes, beta, &sum_dy);
    }
    if nodes[gamma.index].requires_grad {
        accum(nodes, gamma, &sum_dy_xhat);
    }
    if nodes[x.index].requires_grad {
        let mut dx = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let span = (ni * c + ci) * plane..(ni * c + ci + 1) * plane;
                let scale = gd[ci] * invstd[ci];
                for i in span {
                    let g = grad[i];
                    dx[i] = if train {
                        let xhat = (xd[i] - mean[ci]) * invstd[ci];
                        scale * (g - sum_dy[ci] / m - xhat * sum_dy_xhat[ci] / m)
                    } else {
                        scale * g
                    };
                }
            }
        }
        accum(nodes, x, &dx);
    }
}

pub(crate) fn backward_upsample_nearest<T: Real>(
    x: Var,
    factor: usize,
    out: &Tensor<T>,
    grad: &[T],
    nodes: &mut [Node<T>],
) {
    let (n, c, h, w) = nodes[x.index].value.dims4("upsample bwd").unwrap();
    let (_, _, _, ow) = out.dims4("upsample bwd out").unwrap();
    let mut dx = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        let g = &grad[nc * h * factor * ow..(nc + 1) * h * factor * ow];
        let d = &mut dx[nc * h * w..(nc + 1) * h * w];
        for ih in 0..h {
            for iw in 0..w {
                let mut acc = T::zero();
                for fi in 0..factor {
                    let row = (ih * factor + fi) * ow + iw * factor;
                    for &gv in &g[row..row + factor] {
                        acc += gv;
                    }
                }
                d[ih * w + iw] = acc;
            }
        }
    }
    accum(nodes, x, &dx);
}

pub(crate) fn backward_global_avg_pool<T: Real>(x: Var, grad: &[T], nodes: &mut [Node<T>]) {
    let (n, c, h, w) = nodes[x.index].value.dims4("gap bwd").unwrap();
    let inv = T::one() / T::from_f64((h * w) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        let g = grad[nc] * inv;
        for v in &mut dx[nc * h * w..(nc + 1) * h * w] {
            *v = g;
        }
    }
    accum(nodes, x, &dx);
}

pub(crate) fn backward_linear<T: Real>(x: Var, w: Var, b: Var, grad: &[T], nodes: &mut [Node<T>]) {
    let (n, f) = nodes[x.index].value.dims2("linear bwd x").unwrap();
    let (_, g) = nodes[w.index].value.dims2("linear bwd w").unwrap();
    let xd = nodes[x.index].value.data().to_vec();
    let wd = nodes[w.index].value.data().to_vec();
    if nodes[b.index].requires_grad {
        let mut db = vec![T::zero(); g];
        for row in grad.chunks(g) {
            for (d, &gv) in db.iter_mut().zip(row) {
                *d += gv;
            }
        }
        accum(nodes, b, &db);
    }
    if nodes[x.index].requires_grad {
        let mut dx = vec![T::zero(); n * f];
        unsafe {
            // dx(NxF) = grad(NxG) * w^T(GxF)
            T::gemm(
                n,
                g,
                f,
                T::one(),
                grad.as_ptr(),
                g as isize,
                1,
                wd.as_ptr(),
                1,
                g as isize,
                T::zero(),
                dx.as_mut_ptr(),
                f as isize,
                1,
            );
        }
        accum(nodes, x, &dx);
    }
    if nodes[w.index].requires_grad {
        let mut dw = vec![T::zero(); f * g];
        unsafe {
            // dw(FxG) = x^T(FxN) * grad(NxG)
            T::gemm(
                f,
                n,
                g,
                T::one(),
                xd.as_ptr(),
                1,
                f as isize,
                grad.as_ptr(),
                g as isize,
                1,
                T::zero(),
                dw.as_mut_ptr(),
                g as isize,
                1,
            );
        }
        accum(nodes, w, &dw);
    }
}

pub(crate) fn backward_bce_loss<T: Real>(
    probs: Var,
    labels: &[u8],
    floor: T,
    grad: &[T],
    nodes: &mut [Node<T>],
) {
    let n = labels.len();
    let pd = nodes[probs.index].value.data().to_vec();
    let scale = grad[0] / T::from_f64(n as f64);
    let mut dp = vec![T::zero(); pd.len()];
    for (i, &l) in labels.iter().enumerate() {
        let idx = i * 2 + l as usize;
        let p = pd[idx];
        if p >= floor {
            dp[idx] = -scale / p;
        }
        // below the clamp floor the loss is constant in p
    }
    accum(nodes, probs, &dp);
}

pub(crate) fn backward_mse_loss<T: Real>(a: Var, b: Var, grad: &[T], nodes: &mut [Node<T>]) {
    let ad = nodes[a.index].value.data().to_vec();
    let bd = nodes[b.index].value.data().to_vec();
    let m = T::from_f64(ad.len() as f64);
    let two = T::from_f64(2.0);
    let scale = grad[0] * two / m;
    let da: Vec<T> = ad.iter().zip(&bd).map(|(&x, &y)| scale * (x - y)).collect();
    if nodes[a.index].requires_grad {
        accum(nodes, a, &da);
    }
    if nodes[b.index].requires_grad {
        let db: Vec<T> = da.iter().map(|&v| -v).collect();
        accum(nodes, b, &db);
    }
}
