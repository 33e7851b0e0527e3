//! Segment stream on one image: receptive-field projection, mask
//! backprojection, the three-context descriptor and MLP scores.

use anyhow::Result;
use dcl::data::synthetic_samples;
use dcl::msfcn::{build_msfcn, forward_image, NetworkSpec};
use dcl::pipeline::segment_stream_map;
use dcl::segment_stream::{
    backproject_segment_mask, build_descriptor, descriptor_len, init_mlp, project_rf_centers, score_segments, FeatureView,
    PoolMode,
};
use dcl::segmentation::{default_levels, multi_level_segment};

fn main() -> Result<()> {
    let spec = NetworkSpec::default();
    let weights = build_msfcn(&spec, 7)?;
    let sample = &synthetic_samples(1, 11, 64, 64)[0];
    let out = forward_image(&weights, &spec, &sample.image)?;
    let fm = FeatureView::from_tensor(&out.feature)?;
    let rf = project_rf_centers(&spec, 64, 64);
    println!("feature map {}x{}x{}, rf stride {} offset {}", fm.channels, fm.height, fm.width, rf.stride, rf.offset);

    let levels = multi_level_segment(&sample.image, &default_levels())?;
    let level = &levels[0];
    let seg = &level.segments[0];
    let mask = backproject_segment_mask(seg, &rf);
    println!(
        "segment 0: {} px, bbox {:?}, covers {} feature cells",
        seg.pixels.len(),
        seg.bbox,
        mask.iter().filter(|&&m| m).count()
    );

    let d = build_descriptor(seg, level, 0, fm, &rf, PoolMode::Max)?;
    println!("descriptor length {} (= {})", d.features.len(), descriptor_len(fm.channels));

    let mlp = init_mlp(descriptor_len(fm.channels), 64, 3)?;
    let descs: Vec<_> = level
        .segments
        .iter()
        .map(|s| build_descriptor(s, level, 0, fm, &rf, PoolMode::Max))
        .collect::<dcl::Result<_>>()?;
    let scores = score_segments(&descs, &mlp)?;
    println!("untrained scores of the first five segments: {:.3?}", &scores[..5.min(scores.len())]);

    let s2 = segment_stream_map(&out.feature, &levels, &rf, &mlp, PoolMode::Max)?;
    println!("S2 range {:?}", s2.map.min_max());
    Ok(())
}
