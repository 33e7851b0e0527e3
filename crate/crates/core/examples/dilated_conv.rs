//! A dilated convolution equals an ordinary convolution with a
//! zero-upsampled kernel; also prints the network's receptive-field geometry.

use anyhow::Result;
use dcl::msfcn::NetworkSpec;
use dcl::segment_stream::rf_geometry;
use dcl::tensor::{dilated_conv2d, ConvSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[1, 2, 12, 12], |_| rng.gen_range(-1.0..1.0));
    let spec = ConvSpec::same(2, 3, 3, 1, 2);
    let w = Tensor::from_fn(&spec.weight_dims(), |_| rng.gen_range(-1.0..1.0));
    let b = Tensor::zeros(&[3]);

    let dilated = dilated_conv2d(&x, &spec, &w, &b)?;
    let plain = dilated_conv2d(&x, &spec.zero_upsampled(), &dcl::tensor::zero_upsample_kernel(&w, 2)?, &b)?;
    let max_diff = dilated
        .data()
        .iter()
        .zip(plain.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("output {:?}, effective kernel {:?}, max difference {max_diff:e}", dilated.dims(), spec.effective_kernel());

    let (stride, offset) = rf_geometry(&NetworkSpec::default());
    println!("feature-map stride {stride}, receptive-field centre offset {offset}");
    Ok(())
}
