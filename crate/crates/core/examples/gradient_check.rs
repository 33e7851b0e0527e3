//! Compares tape gradients with central differences for a small network:
//! dilated convolution, ReLU, bilinear upsampling, sigmoid and the
//! class-balanced loss.

use anyhow::Result;
use dcl::tensor::{ConvSpec, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(x: &Tensor, w: &Tensor, b: &Tensor, gt: &[f64], spec: &ConvSpec, grad: bool) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.param(w.clone());
    let bv = tape.param(b.clone());
    let y = tape.conv2d(xv, wv, bv, spec)?;
    let y = tape.relu(y);
    let y = tape.bilinear_resize(y, 8, 8)?;
    let y = tape.sigmoid(y);
    let l = tape.balanced_bce(y, gt)?;
    let value = tape.value(l).scalar_value();
    if !grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(l)?;
    Ok((value, tape.grad(wv).expect("weight gradient").to_vec()))
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = ConvSpec::same(2, 1, 3, 1, 2);
    let x = Tensor::from_fn(&[1, 2, 6, 6], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::from_fn(&spec.weight_dims(), |_| rng.gen_range(-0.5..0.5));
    let b = Tensor::full(&[1], 0.1);
    let gt: Vec<f64> = (0..64).map(|i| if (i % 8) < 3 { 1.0 } else { 0.0 }).collect();

    let (_, analytic) = loss(&x, &w, &b, &gt, &spec, true)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut wp = w.clone();
        wp.data_mut()[i] += h;
        let mut wm = w.clone();
        wm.data_mut()[i] -= h;
        let numeric = (loss(&x, &wp, &b, &gt, &spec, false)?.0 - loss(&x, &wm, &b, &gt, &spec, false)?.0) / (2.0 * h);
        let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    println!("{} weights checked, worst relative error {worst:.2e}", w.len());
    Ok(())
}
