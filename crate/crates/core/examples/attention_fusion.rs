//! Fuses two saliency maps with attention weights and with the fixed
//! alternatives.

use anyhow::Result;
use dcl::fusion::{attention_forward, build_fusion, downsample_to_low, fuse_saliency, AttentionWeights};
use dcl::image::GrayMap;
use dcl::tensor::Tensor;

fn main() -> Result<()> {
    let (w, h) = (32, 32);
    // S1 is confident on the left half, S2 on the top half.
    let s1 = GrayMap::new(w, h, (0..w * h).map(|i| if i % w < w / 2 { 0.9 } else { 0.2 }).collect())?;
    let s2 = GrayMap::new(w, h, (0..w * h).map(|i| if i / w < h / 2 { 0.8 } else { 0.1 }).collect())?;
    let (s1_low, s2_low) = (downsample_to_low(&s1)?, downsample_to_low(&s2)?);

    for w1 in [1.0, 0.5, 0.0] {
        let fused = fuse_saliency(&s1_low, &s2_low, &AttentionWeights::uniform(4, 4, w1), w, h)?;
        println!("W1 = {w1}: top-left {:.2}, bottom-right {:.2}", fused.map.get(0, 0), fused.map.get(w - 1, h - 1));
    }

    // Learned attention from a feature map (random weights here).
    let store = build_fusion(8, 16, 1)?;
    let feature = Tensor::from_fn(&[1, 8, 4, 4], |i| ((i * 37) % 11) as f64 / 11.0);
    let att = attention_forward(&feature, &store)?;
    let sums: Vec<f64> = att.w1.data.iter().zip(&att.w2.data).map(|(a, b)| a + b).collect();
    println!("attention W1 mean {:.3}, W1+W2 within [{:.12}, {:.12}]", att.w1.data.iter().sum::<f64>() / 16.0,
        sums.iter().cloned().fold(f64::MAX, f64::min), sums.iter().cloned().fold(f64::MIN, f64::max));
    let fused = fuse_saliency(&s1_low, &s2_low, &att, w, h)?;
    println!("attention-fused range {:?}", fused.map.min_max());
    Ok(())
}
