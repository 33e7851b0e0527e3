//! Builds the multiscale fully convolutional stream, runs it at one scale and
//! with multi-scale input, and lists the parameter groups.

use anyhow::Result;
use dcl::data::synthetic_samples;
use dcl::msfcn::{build_msfcn, forward_image, multiscale_infer, per_scale_maps, NetworkSpec, INPUT_SCALES};

fn main() -> Result<()> {
    let spec = NetworkSpec::default();
    let weights = build_msfcn(&spec, 7)?;
    println!("{} tensors, {} parameters", weights.len(), weights.parameter_count());
    for prefix in ["stage", "fc", "score", "branch", "fuse"] {
        let group = weights.filter_prefix(prefix);
        println!("  {prefix}*: {} parameters", group.parameter_count());
    }

    let image = &synthetic_samples(1, 5, 64, 64)[0].image;
    let out = forward_image(&weights, &spec, image)?;
    println!("feature map {:?}, S1 {}x{}", out.feature.dims(), out.s1.map.width, out.s1.map.height);

    for (scale, m) in INPUT_SCALES.iter().zip(per_scale_maps(&weights, &spec, image)?) {
        let (lo, hi) = m.min_max();
        println!("scale {scale}: range [{lo:.3}, {hi:.3}]");
    }
    let fused = multiscale_infer(&weights, &spec, image)?;
    println!("max over scales: range {:?}", fused.map.min_max());
    Ok(())
}
