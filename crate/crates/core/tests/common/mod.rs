#![allow(dead_code)]

use dcl::image::{BinaryMap, GrayMap, RgbImage};
use dcl::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Relative error between the tape gradient and central differences of the
/// scalar returned by `f`, over every element of every input tensor.
///
/// `f` records a loss from the given inputs and returns it together with the
/// variables whose gradients correspond to `inputs`, in order. The error is
/// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)` over the concatenated gradient.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Tensor]) -> (Var, Vec<Var>),
{
    let mut tape = Tape::new();
    let (loss, vars) = f(&mut tape, inputs);
    assert_eq!(vars.len(), inputs.len());
    tape.backward(loss).expect("backward");
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let (loss, _) = f(&mut tape, xs);
        tape.value(loss).scalar_value()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
        }
    }
    let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Reduces a tensor to a scalar with a squared error against fixed targets.
pub fn reduce(tape: &mut Tape, v: Var, targets: &[f64]) -> Var {
    tape.squared_error(v, targets).expect("reduce")
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

/// Values that are pairwise at least 0.05 apart, so max selections are
/// stable under finite-difference steps.
pub fn distinct_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        values.swap(i, j);
    }
    Tensor::new(dims.to_vec(), values).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayMap {
    GrayMap::new(w, h, (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> BinaryMap {
    BinaryMap::new(w, h, (0..w * h).map(|_| u8::from(rng.gen_bool(p))).collect()).unwrap()
}
