//! The bi-level step on a scalar toy problem, small enough to verify by hand:
//! L = (theta * phi * x - y)^2 with x = 1, y = 0, both parameters at 1.0,
//! alpha = 0.1, K = 1, no momentum.
//!
//! Inner step, theta frozen:  dL/dphi = 2(theta*phi*x - y)*theta*x = 2,
//! so phi <- 1 - 0.1*2 = 0.8. Outer step with the updated phi frozen:
//! dL/dtheta = 2(0.8)*0.8 = 1.28, so theta <- 1 - 0.128 = 0.872.
//!
//! The point of the example is that the trainer is generic: the same
//! meta_train_step that drives the image model runs this two-parameter toy.
//!
//!     cargo run --example bilevel_toy

use metapattern::nn::{Binding, ParameterSet};
use metapattern::tensor::{Tape, Tensor, Var};
use metapattern::trainer;
use metapattern::Result;

type Batch = (f64, f64);

fn toy_loss(
    tape: &mut Tape<f64>,
    phi: &mut Binding<'_, f64>,
    theta: &mut Binding<'_, f64>,
    batch: &Batch,
) -> Result<Var> {
    let (xv, yv) = *batch;
    let p = phi.var(tape, "phi")?;
    let t = theta.var(tape, "theta")?;
    let x = tape.leaf(Tensor::scalar(xv), false);
    let y = tape.leaf(Tensor::scalar(yv), false);
    let px = tape.mul(p, x)?;
    let pred = tape.mul(t, px)?;
    let resid = tape.sub(pred, y)?;
    tape.mul(resid, resid)
}

fn main() -> Result<()> {
    let mut phi: ParameterSet<f64> = ParameterSet::new();
    phi.insert("phi", Tensor::scalar(1.0), true);
    let mut theta: ParameterSet<f64> = ParameterSet::new();
    theta.insert("theta", Tensor::scalar(1.0), true);

    let batch: Batch = (1.0, 0.0);
    let loss = trainer::meta_train_step(
        &mut phi,
        &mut theta,
        1,
        0.1,
        0.0,
        || Ok(batch),
        &batch,
        &mut toy_loss,
    )?;

    let p = phi.value("phi")?.item()?;
    let t = theta.value("theta")?.item()?;
    println!("outer loss {loss:.6}");
    println!("phi   after inner step: {p:.6}  (expected 0.800000)");
    println!("theta after outer step: {t:.6}  (expected 0.872000)");
    assert!((p - 0.8).abs() < 1e-12);
    assert!((t - 0.872).abs() < 1e-12);
    Ok(())
}
