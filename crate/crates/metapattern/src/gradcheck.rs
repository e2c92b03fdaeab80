//! Finite-difference verification of the reverse-mode gradients.
//!
//! Everything runs in `f64`: central differences in single precision lose
//! too many digits to separate real bugs from roundoff. Each case builds a
//! random scalar loss, takes one backward pass, then perturbs a sample of
//! input coordinates by `h` in both directions and compares.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{
    build_extractor, extractor_forward, hfm_fuse, ExtractorSpec, ExtractorVariant,
};
use crate::nn::{init_conv, Binding, ParameterSet};
use crate::tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates sampled per input tensor; small tensors are checked fully.
const COORDS_PER_INPUT: usize = 6;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub trials: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Relative error with an absolute floor of 1 in the denominator, so tiny
/// gradients are compared absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check one differentiable map on one set of inputs. `f` must read its
/// inputs from the vars it is given and return a scalar loss. Returns the
/// worst relative error over the sampled coordinates of every input.
pub fn check_case<F>(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, mut f: F) -> Result<(f64, usize)>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |f: &mut F, tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .ok_or_else(|| Error::Tape("missing gradient for checked input".into()))
        })
        .collect::<Result<_>>()?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > COORDS_PER_INPUT {
            coords.shuffle(rng);
            coords.truncate(COORDS_PER_INPUT);
        }
        for &ci in &coords {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + STEP;
            let up = eval(&mut f, &work)?;
            work[ti].data_mut()[ci] = orig - STEP;
            let down = eval(&mut f, &work)?;
            work[ti].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[ti][ci], fd));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<(f64, usize)>;

fn case_add_mul_scale(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let a = rand_tensor(&[2, 3], rng);
    let b = rand_tensor(&[2, 3], rng);
    let c = rand_tensor(&[1], rng);
    check_case(&[a, b, c], rng, |t, v| {
        let s = t.add(v[0], v[1])?;
        let m = t.mul(s, v[0])?;
        let sub = t.sub(m, v[1])?;
        let sc = t.mul(sub, v[2])?; // scalar broadcast
        let sc = t.scale(sc, 0.7)?;
        t.mean_all(sc)
    })
}

fn case_activations(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    // keep inputs away from relu's kink at 0
    let n = 12;
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::new(vec![3, 4], data)?;
    check_case(&[x], rng, |t, v| {
        let r = t.relu(v[0])?;
        let s = t.sigmoid(r)?;
        let sm = t.softmax_last(s)?;
        t.mean_all(sm)
    })
}

fn case_concat_upsample_pool(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let a = rand_tensor(&[2, 2, 2, 2], rng);
    let b = rand_tensor(&[2, 3, 2, 2], rng);
    check_case(&[a, b], rng, |t, v| {
        let c = t.concat_channels(&[v[0], v[1]])?;
        let u = t.upsample_nearest(c, 2)?;
        let p = t.global_avg_pool(u)?;
        let s = t.sigmoid(p)?;
        t.mean_all(s)
    })
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let x = rand_tensor(&[2, 3, 5, 5], rng);
    let w = rand_tensor(&[4, 3, 3, 3], rng);
    let b = rand_tensor(&[4], rng);
    check_case(&[x, w, b], rng, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let y = t.sigmoid(y)?;
        t.mean_all(y)
    })
}

fn case_conv2d_strided(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let x = rand_tensor(&[1, 2, 8, 8], rng);
    let w = rand_tensor(&[3, 2, 3, 3], rng);
    check_case(&[x, w], rng, |t, v| {
        let y = t.conv2d(v[0], v[1], None, 2, 1)?;
        let y = t.relu(y)?;
        t.mean_all(y)
    })
}

fn case_cdc_conv(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let x = rand_tensor(&[1, 2, 6, 6], rng);
    let w = rand_tensor(&[2, 2, 3, 3], rng);
    let b = rand_tensor(&[2], rng);
    check_case(&[x, w, b], rng, |t, v| {
        let main = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let wsum = t.kernel_spatial_sum(v[1])?;
        let center = t.conv2d(v[0], wsum, None, 1, 0)?;
        let scaled = t.scale(center, 0.7)?;
        let y = t.sub(main, scaled)?;
        let y = t.sigmoid(y)?;
        t.mean_all(y)
    })
}

fn case_batchnorm_train(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let x = rand_tensor(&[3, 2, 3, 3], rng);
    let g = positive_tensor(&[2], rng);
    let b = rand_tensor(&[2], rng);
    check_case(&[x, g, b], rng, |t, v| {
        let out = t.batchnorm(v[0], v[1], v[2], &[0.0, 0.0], &[1.0, 1.0], 1e-5, true)?;
        let s = t.sigmoid(out.y)?;
        t.mean_all(s)
    })
}

fn case_batchnorm_eval(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let x = rand_tensor(&[2, 2, 3, 3], rng);
    let g = positive_tensor(&[2], rng);
    let b = rand_tensor(&[2], rng);
    let rm = [0.1, -0.2];
    let rv = [0.9, 1.3];
    check_case(&[x, g, b], rng, move |t, v| {
        let out = t.batchnorm(v[0], v[1], v[2], &rm, &rv, 1e-5, false)?;
        t.mean_all(out.y)
    })
}

fn case_linear(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let x = rand_tensor(&[4, 5], rng);
    let w = rand_tensor(&[5, 3], rng);
    let b = rand_tensor(&[3], rng);
    check_case(&[x, w, b], rng, |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        let y = t.sigmoid(y)?;
        t.mean_all(y)
    })
}

fn case_losses(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let logits = rand_tensor(&[3, 2], rng);
    let m = rand_tensor(&[3, 1, 2, 2], rng);
    let target = rand_tensor(&[3, 1, 2, 2], rng);
    let labels = [0u8, 1, 1];
    check_case(&[logits, m, target], rng, move |t, v| {
        let probs = t.softmax_last(v[0])?;
        let bce = t.bce_loss(probs, &labels)?;
        let map = t.sigmoid(v[1])?;
        let mse = t.mse_loss(map, v[2])?;
        t.add(bce, mse)
    })
}

fn case_hfm_fuse(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let mt = rand_tensor(&[1, 3, 4, 4], rng);
    let mb = rand_tensor(&[1, 3, 4, 4], rng);
    let prev = rand_tensor(&[1, 2, 2, 2], rng);
    let wt = rand_tensor(&[2, 3, 1, 1], rng);
    let wb = rand_tensor(&[2, 3, 1, 1], rng);
    let wp = rand_tensor(&[2, 2, 1, 1], rng);
    check_case(&[mt, mb, prev, wt, wb, wp], rng, |t, v| {
        let mut p = ParameterSet::new();
        p.insert("f.ct.w", t.value(v[3]).clone(), false);
        p.insert("f.cb.w", t.value(v[4]).clone(), false);
        p.insert("f.cp.w", t.value(v[5]).clone(), false);
        // bind the weight vars directly so their gradients are exercised
        let mut bind = Binding::new(&mut p, false, false);
        bind.bind_existing("f.ct.w", v[3]);
        bind.bind_existing("f.cb.w", v[4]);
        bind.bind_existing("f.cp.w", v[5]);
        let m = hfm_fuse(t, &mut bind, "f", v[0], v[1], Some(v[2]))?;
        let s = t.sigmoid(m)?;
        t.mean_all(s)
    })
}

fn case_extractor_forward(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let spec = ExtractorSpec {
        variant: ExtractorVariant::Cdc2,
        hidden_channels: 4,
        cdc_theta: 0.7,
        extra_bn: false,
    };
    let params = build_extractor::<f64>(&spec, rng)?;
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let x = rand_tensor(&[2, 3, 6, 6], rng);
    let mut inputs = vec![x];
    for n in &names {
        inputs.push(params.value(n)?.clone());
    }
    check_case(&inputs, rng, move |t, v| {
        let mut p = params.clone();
        let mut bind = Binding::new(&mut p, false, true);
        for (i, n) in names.iter().enumerate() {
            // overwrite stored values so finite-difference perturbations of
            // the input tensors reach the forward pass
            bind.params.get_mut(n)?.value = t.value(v[i + 1]).clone();
            bind.bind_existing(n, v[i + 1]);
        }
        let y = extractor_forward(t, &mut bind, &spec, v[0])?;
        t.mean_all(y)
    })
}

fn case_random_conv_net(rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    // small random two-conv net, fresh shapes every trial
    let cin = rng.gen_range(1..4);
    let cmid = rng.gen_range(1..4);
    let side = rng.gen_range(4..7);
    let x = rand_tensor(&[1, cin, side, side], rng);
    let mut p = ParameterSet::new();
    init_conv(&mut p, "a", cmid, cin, 3, true, rng);
    init_conv(&mut p, "b", 1, cmid, 3, true, rng);
    let w1 = p.value("a.w")?.clone();
    let b1 = p.value("a.b")?.clone();
    let w2 = p.value("b.w")?.clone();
    let b2 = p.value("b.b")?.clone();
    check_case(&[x, w1, b1, w2, b2], rng, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let y = t.sigmoid(y)?;
        let y = t.conv2d(y, v[3], Some(v[4]), 1, 1)?;
        let y = t.sigmoid(y)?;
        t.mean_all(y)
    })
}

pub const CASES: &[(&str, CaseFn)] = &[
    ("add_mul_scale_mean", case_add_mul_scale),
    ("relu_sigmoid_softmax", case_activations),
    ("concat_upsample_pool", case_concat_upsample_pool),
    ("conv2d_padded", case_conv2d),
    ("conv2d_strided", case_conv2d_strided),
    ("central_difference_conv", case_cdc_conv),
    ("batchnorm_train", case_batchnorm_train),
    ("batchnorm_eval", case_batchnorm_eval),
    ("linear", case_linear),
    ("bce_plus_mse", case_losses),
    ("hierarchical_fusion", case_hfm_fuse),
    ("extractor_forward", case_extractor_forward),
    ("random_conv_net", case_random_conv_net),
];

/// Run every case `trials` times with fresh random inputs; aggregate the
/// worst relative error per case.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, case) in CASES {
        let mut worst = 0.0f64;
        let mut coords = 0;
        for _ in 0..trials {
            let (err, n) = case(&mut rng)?;
            worst = worst.max(err);
            coords += n;
        }
        out.push(CaseResult {
            name: (*name).to_string(),
            trials,
            coords_checked: coords,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_small_trial_count() {
        for r in run_suite(3, 42).unwrap() {
            assert!(r.passed(), "{}: max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn check_case_flags_a_wrong_gradient() {
        // function that lies: reports grads of mean(x) but evaluates
        // mean(2x) when the input is not tracked (the fd passes)
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 2], &mut rng);
        let (err, _) = check_case(&[x], &mut rng, |t, v| {
            if t.requires_grad_of(v[0]) {
                t.mean_all(v[0])
            } else {
                let y = t.scale(v[0], 2.0)?;
                t.mean_all(y)
            }
        })
        .unwrap();
        assert!(err > TOLERANCE);
    }
}
