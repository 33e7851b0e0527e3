//! Multi-level graph-based segmentation of one synthetic image.

use anyhow::Result;
use dcl::data::synthetic_samples;
use dcl::segmentation::{default_levels, multi_level_segment, segment_saliency_label};

fn main() -> Result<()> {
    let sample = &synthetic_samples(1, 3, 64, 64)[0];
    let levels = multi_level_segment(&sample.image, &default_levels())?;
    for (i, level) in levels.iter().enumerate() {
        let salient = level
            .segments
            .iter()
            .filter(|s| segment_saliency_label(s, &sample.mask) == 1)
            .count();
        let largest = level.segments.iter().map(|s| s.pixels.len()).max().unwrap_or(0);
        println!(
            "level {} (k = {}): {} segments, {salient} salient, largest {largest} px",
            i + 1,
            level.params.k,
            level.len()
        );
    }
    Ok(())
}
