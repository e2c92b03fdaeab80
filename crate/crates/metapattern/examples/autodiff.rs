//! Tape basics: build a small expression, run reverse mode, read gradients.
//!
//!     cargo run --example autodiff

use metapattern::tensor::{Tape, Tensor};
use metapattern::Result;

fn main() -> Result<()> {
    let mut tape: Tape<f64> = Tape::new();

    // y = mean(relu(x * w + x)) over a 2x3 matrix
    let x = tape.leaf(
        Tensor::new(vec![2, 3], vec![-1.0, 0.5, 2.0, 3.0, -0.25, 1.5])?,
        true,
    );
    let w = tape.leaf(Tensor::full(&[2, 3], 0.5), true);
    let xw = tape.mul(x, w)?;
    let s = tape.add(xw, x)?;
    let r = tape.relu(s)?;
    let y = tape.mean_all(r)?;

    println!("y = {:.6}", tape.value(y).item()?);
    tape.backward(y)?;
    println!("dy/dx = {:?}", tape.grad(x).unwrap());
    println!("dy/dw = {:?}", tape.grad(w).unwrap());

    // A convolution participates like any other op.
    let mut tape: Tape<f64> = Tape::new();
    let img = tape.leaf(Tensor::full(&[1, 1, 4, 4], 1.0), true);
    let kernel = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), true);
    let out = tape.conv2d(img, kernel, None, 1, 1)?;
    let pooled = tape.mean_all(out)?;
    println!("mean conv output = {:.6}", tape.value(pooled).item()?);
    tape.backward(pooled)?;
    println!(
        "dkernel (each tap sees how many pixels it touched): {:?}",
        tape.grad(kernel).unwrap()
    );
    Ok(())
}
