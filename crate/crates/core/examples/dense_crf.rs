//! Refines a noisy saliency map with the fully connected CRF, with and
//! without the contour term.

use anyhow::Result;
use dcl::crf::{contour_embedding, crf_energy, mean_field_infer, binarize, CrfConfig};
use dcl::data::synthetic_samples;
use dcl::eval::image_mae;
use dcl::image::GrayMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let sample = &synthetic_samples(1, 21, 48, 48)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noisy = GrayMap::new(
        48,
        48,
        sample.mask.as_f64().iter().map(|&g| (0.3 + 0.4 * g + rng.gen_range(-0.25..0.25)).clamp(0.01, 0.99)).collect(),
    )?;
    let cfg = CrfConfig::default();
    let plain = mean_field_infer(&noisy, &sample.image, None, &cfg)?;

    // Use the mask boundary as an ideal contour map.
    let edge = dcl::msfcn::prepare_contour_gt(&sample.mask).to_gray();
    let emb = contour_embedding(&edge, cfg.rho, 16)?;
    let guided = mean_field_infer(&noisy, &sample.image, Some(&emb), &cfg)?;

    for (name, m) in [("input", &noisy), ("crf", &plain.map), ("crf + contour", &guided.map)] {
        let labels = binarize(m);
        let e = crf_energy(&labels, &noisy, &sample.image, Some(&emb), &cfg)?;
        println!("{name:>14}: MAE {:.4}, energy of its labeling {e:.1}", image_mae(m, &sample.mask));
    }
    Ok(())
}
