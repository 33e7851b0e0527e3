//! Segment-wise spatial pooling stream.
//!
//! Each segment is backprojected onto the feature-masking layer, its masked
//! features are pooled on a fixed grid over three nested regions (segment
//! box, box of the segment plus its neighbours, whole map with the segment
//! zeroed), and a small MLP scores the concatenated descriptor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{GrayMap, MapSource, SaliencyMap};
use crate::msfcn::{NetworkSpec, WeightStore};
use crate::segmentation::{BoundingBox, Segment, SegmentationLevel};
use crate::tensor::{Tape, Tensor, Var};

pub const GRID_H: usize = 2;
pub const GRID_W: usize = 2;

/// Receptive-field geometry of the feature-masking layer.
///
/// Location `(i, j)` of the layer is centred at image coordinates
/// `(stride·i + offset, stride·j + offset)`; every image pixel is assigned
/// to the location whose centre is nearest.
#[derive(Clone, Debug, PartialEq)]
pub struct RfProjection {
    pub stride: usize,
    pub offset: f64,
    pub image_h: usize,
    pub image_w: usize,
    pub fm_h: usize,
    pub fm_w: usize,
    /// Per image pixel, the flat feature-map location it is assigned to.
    pub assignment: Vec<usize>,
    /// Per feature-map location, how many pixels are assigned to it.
    pub counts: Vec<usize>,
}

impl RfProjection {
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.stride as f64 * i as f64 + self.offset,
            self.stride as f64 * j as f64 + self.offset,
        )
    }

    fn nearest(&self, coord: usize, len: usize) -> usize {
        let t = ((coord as f64 - self.offset) / self.stride as f64).round();
        t.clamp(0.0, (len - 1) as f64) as usize
    }

    pub fn row_of(&self, y: usize) -> usize {
        self.nearest(y, self.fm_h)
    }

    pub fn col_of(&self, x: usize) -> usize {
        self.nearest(x, self.fm_w)
    }

    /// Projects an image-space box onto the feature map (outward rounding).
    pub fn project_bbox(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            min_row: self.row_of(b.min_row),
            min_col: self.col_of(b.min_col),
            max_row: self.row_of(b.max_row),
            max_col: self.col_of(b.max_col),
        }
    }
}

/// Accumulates stride and centre offset through the layers up to and
/// including the feature-masking layer. A layer with kernel `k`, dilation
/// `d`, padding `p` and stride `s` maps output index `j` to an input window
/// centred at `s·j − p + d·(k−1)/2`; composing these gives `stride·i + offset`.
pub fn rf_geometry(spec: &NetworkSpec) -> (usize, f64) {
    let mut stride = 1usize;
    let mut offset = 0.0f64;
    let mut apply = |k: usize, d: usize, p: usize, s: usize| {
        offset += stride as f64 * (-(p as f64) + (d * (k - 1)) as f64 / 2.0);
        stride *= s;
    };
    for (si, layers) in spec.backbone_layers().iter().enumerate() {
        for l in layers {
            apply(l.spec.kernel_h, l.spec.dilation, l.spec.padding, l.spec.stride);
        }
        // Stage 5's own pool comes after the feature-masking layer.
        if si < 4 {
            match spec.stages[si].pool_stride {
                2 => apply(2, 1, 0, 2),
                _ => apply(3, 1, 1, 1),
            }
        }
    }
    (stride, offset)
}

/// Receptive-field centres and nearest-centre assignment for an image of
/// `image_h × image_w` pixels (already padded to a multiple of the stride).
pub fn project_rf_centers(spec: &NetworkSpec, image_h: usize, image_w: usize) -> RfProjection {
    let (stride, offset) = rf_geometry(spec);
    let fm_h = image_h.div_ceil(stride);
    let fm_w = image_w.div_ceil(stride);
    let mut rf = RfProjection {
        stride,
        offset,
        image_h,
        image_w,
        fm_h,
        fm_w,
        assignment: Vec::with_capacity(image_h * image_w),
        counts: vec![0; fm_h * fm_w],
    };
    for y in 0..image_h {
        let r = rf.row_of(y);
        for x in 0..image_w {
            let loc = r * fm_w + rf.col_of(x);
            rf.assignment.push(loc);
            rf.counts[loc] += 1;
        }
    }
    rf
}

/// Feature-map mask of a segment: locations where at least half of the
/// assigned pixels belong to the segment, or, if there are none, every
/// location receiving any segment pixel.
pub fn backproject_segment_mask(segment: &Segment, rf: &RfProjection) -> Vec<bool> {
    let mut hits = vec![0usize; rf.fm_h * rf.fm_w];
    for &p in &segment.pixels {
        hits[rf.assignment[p]] += 1;
    }
    let mut mask: Vec<bool> = hits
        .iter()
        .zip(&rf.counts)
        .map(|(&h, &c)| c > 0 && 2 * h >= c)
        .collect();
    if !mask.iter().any(|&m| m) {
        mask = hits.iter().map(|&h| h > 0).collect();
    }
    mask
}

/// Channel-wise product of a `[C, H, W]` feature map with a spatial mask.
pub fn mask_features(feature: &[f64], channels: usize, mask: &[bool]) -> Vec<f64> {
    let plane = mask.len();
    debug_assert_eq!(feature.len(), channels * plane);
    let mut out = feature.to_vec();
    for c in 0..channels {
        for (v, &m) in out[c * plane..(c + 1) * plane].iter_mut().zip(mask) {
            if !m {
                *v = 0.0;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

/// Row span of grid cell `i` out of `cells` over `len` rows; every cell gets
/// at least one row.
fn cell_span(i: usize, cells: usize, len: usize) -> (usize, usize) {
    let start = (i * len) / cells;
    let end = ((i + 1) * len).div_ceil(cells).max(start + 1);
    (start, end.min(len))
}

/// Pools a `[C, fm_h, fm_w]` map over a `grid_h × grid_w` partition of
/// `region`, using only positions where `valid` is true. Output is cell-major:
/// `[cell0: C values, cell1: C values, ...]`. Cells without a valid position
/// are zero.
#[allow(clippy::too_many_arguments)]
pub fn spatial_pool(
    features: &[f64],
    channels: usize,
    fm_w: usize,
    region: &BoundingBox,
    valid: &[bool],
    grid_h: usize,
    grid_w: usize,
    mode: PoolMode,
) -> Vec<f64> {
    let plane = valid.len();
    let (rh, rw) = (region.height(), region.width());
    let mut out = vec![0.0; grid_h * grid_w * channels];
    for gy in 0..grid_h {
        let (y0, y1) = cell_span(gy, grid_h, rh);
        for gx in 0..grid_w {
            let (x0, x1) = cell_span(gx, grid_w, rw);
            let cell = &mut out[(gy * grid_w + gx) * channels..(gy * grid_w + gx + 1) * channels];
            let positions: Vec<usize> = (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| (region.min_row + y) * fm_w + region.min_col + x))
                .filter(|&p| valid[p])
                .collect();
            if positions.is_empty() {
                continue;
            }
            for (c, slot) in cell.iter_mut().enumerate() {
                let ch = &features[c * plane..(c + 1) * plane];
                *slot = match mode {
                    PoolMode::Max => positions.iter().map(|&p| ch[p]).fold(f64::NEG_INFINITY, f64::max),
                    PoolMode::Mean => positions.iter().map(|&p| ch[p]).sum::<f64>() / positions.len() as f64,
                };
            }
        }
    }
    out
}

/// Fixed-length triple-context feature of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentDescriptor {
    pub features: Vec<f64>,
    pub segment_id: usize,
    pub level_id: usize,
}

pub fn descriptor_len(channels: usize) -> usize {
    3 * GRID_H * GRID_W * channels
}

/// Feature map of one image in `[C, H, W]` layout.
#[derive(Clone, Copy, Debug)]
pub struct FeatureView<'a> {
    pub data: &'a [f64],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<'a> FeatureView<'a> {
    pub fn from_tensor(t: &'a Tensor) -> Result<Self> {
        let (n, c, h, w) = t.nchw()?;
        if n != 1 {
            return Err(Error::shape(format!("expected a single feature map, got batch {n}")));
        }
        Ok(Self {
            data: t.data(),
            channels: c,
            height: h,
            width: w,
        })
    }
}

fn descriptor_from_masks(
    segment: &Segment,
    level_id: usize,
    masks: &[Vec<bool>],
    boxes: &[BoundingBox],
    fm: FeatureView<'_>,
    mode: PoolMode,
) -> SegmentDescriptor {
    let c = fm.channels;
    let own = &masks[segment.id];
    let mut features = Vec::with_capacity(descriptor_len(c));

    let masked = mask_features(fm.data, c, own);
    features.extend(spatial_pool(&masked, c, fm.width, &boxes[segment.id], own, GRID_H, GRID_W, mode));

    let mut near_box = boxes[segment.id];
    let mut near_mask = own.clone();
    for &n in &segment.neighbors {
        near_box = near_box.union(&boxes[n]);
        for (m, &o) in near_mask.iter_mut().zip(&masks[n]) {
            *m |= o;
        }
    }
    let near = mask_features(fm.data, c, &near_mask);
    features.extend(spatial_pool(&near, c, fm.width, &near_box, &near_mask, GRID_H, GRID_W, mode));

    let outside: Vec<bool> = own.iter().map(|&m| !m).collect();
    let rest = mask_features(fm.data, c, &outside);
    let whole = BoundingBox {
        min_row: 0,
        min_col: 0,
        max_row: fm.height - 1,
        max_col: fm.width - 1,
    };
    let all = vec![true; own.len()];
    features.extend(spatial_pool(&rest, c, fm.width, &whole, &all, GRID_H, GRID_W, mode));

    SegmentDescriptor {
        features,
        segment_id: segment.id,
        level_id,
    }
}

/// Descriptors for every segment of one level.
pub fn level_descriptors(
    level: &SegmentationLevel,
    level_id: usize,
    fm: FeatureView<'_>,
    rf: &RfProjection,
    mode: PoolMode,
) -> Result<Vec<SegmentDescriptor>> {
    check_geometry(level, fm, rf)?;
    let masks: Vec<Vec<bool>> = level.segments.iter().map(|s| backproject_segment_mask(s, rf)).collect();
    let boxes: Vec<BoundingBox> = level.segments.iter().map(|s| rf.project_bbox(&s.bbox)).collect();
    Ok(level
        .segments
        .iter()
        .map(|s| descriptor_from_masks(s, level_id, &masks, &boxes, fm, mode))
        .collect())
}

/// Descriptor of a single segment.
pub fn build_descriptor(
    segment: &Segment,
    level: &SegmentationLevel,
    level_id: usize,
    fm: FeatureView<'_>,
    rf: &RfProjection,
    mode: PoolMode,
) -> Result<SegmentDescriptor> {
    check_geometry(level, fm, rf)?;
    let masks: Vec<Vec<bool>> = level.segments.iter().map(|s| backproject_segment_mask(s, rf)).collect();
    let boxes: Vec<BoundingBox> = level.segments.iter().map(|s| rf.project_bbox(&s.bbox)).collect();
    Ok(descriptor_from_masks(segment, level_id, &masks, &boxes, fm, mode))
}

fn check_geometry(level: &SegmentationLevel, fm: FeatureView<'_>, rf: &RfProjection) -> Result<()> {
    if (level.height, level.width) != (rf.image_h, rf.image_w) {
        return Err(Error::shape(format!(
            "segmentation is {}x{}, projection expects {}x{}",
            level.width, level.height, rf.image_w, rf.image_h
        )));
    }
    if (fm.height, fm.width) != (rf.fm_h, rf.fm_w) {
        return Err(Error::shape(format!(
            "feature map is {}x{}, projection expects {}x{}",
            fm.width, fm.height, rf.fm_w, rf.fm_h
        )));
    }
    Ok(())
}

/// Two-layer perceptron scoring descriptors: FC → ReLU → FC → sigmoid.
pub fn init_mlp(input_len: usize, hidden: usize, seed: u64) -> Result<WeightStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for (name, fan_in, fan_out) in [("mlp.fc1", input_len, hidden), ("mlp.fc2", hidden, 1)] {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        store.insert(
            format!("{name}.weight"),
            Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-bound..bound)),
        )?;
        store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(store)
}

pub struct MlpVars {
    pub scores: Var,
    pub params: Vec<(String, Var)>,
}

/// Records the MLP over a `[N, D]` descriptor batch.
pub fn record_mlp(tape: &mut Tape, weights: &WeightStore, input: Var, trainable: bool) -> Result<MlpVars> {
    let mut params = Vec::new();
    let mut leaf = |tape: &mut Tape, name: &str| -> Result<Var> {
        let t = weights.get(name)?.clone();
        let v = if trainable { tape.param(t) } else { tape.constant(t) };
        params.push((name.to_string(), v));
        Ok(v)
    };
    let w1 = leaf(tape, "mlp.fc1.weight")?;
    let b1 = leaf(tape, "mlp.fc1.bias")?;
    let w2 = leaf(tape, "mlp.fc2.weight")?;
    let b2 = leaf(tape, "mlp.fc2.bias")?;
    let h = tape.linear(input, w1, b1)?;
    let h = tape.relu(h);
    let o = tape.linear(h, w2, b2)?;
    let scores = tape.sigmoid(o);
    Ok(MlpVars { scores, params })
}

/// Stacks descriptors into an `[N, D]` tensor.
pub fn descriptor_batch(descriptors: &[SegmentDescriptor]) -> Result<Tensor> {
    let d = descriptors
        .first()
        .map(|x| x.features.len())
        .ok_or_else(|| Error::InvalidArgument("no descriptors to score".into()))?;
    let mut data = Vec::with_capacity(descriptors.len() * d);
    for x in descriptors {
        if x.features.len() != d {
            return Err(Error::shape("descriptors differ in length"));
        }
        data.extend_from_slice(&x.features);
    }
    Tensor::new(vec![descriptors.len(), d], data)
}

/// Per-segment saliency in `[0, 1]`.
pub fn score_segments(descriptors: &[SegmentDescriptor], mlp: &WeightStore) -> Result<Vec<f64>> {
    if descriptors.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let x = tape.constant(descriptor_batch(descriptors)?);
    let vars = record_mlp(&mut tape, mlp, x, false)?;
    Ok(tape.value(vars.scores).data().to_vec())
}

/// Paints each level with its segment scores and averages the levels.
pub fn render_s2(levels: &[SegmentationLevel], scores: &[Vec<f64>]) -> Result<SaliencyMap> {
    let first = levels
        .first()
        .ok_or_else(|| Error::InvalidArgument("render_s2 needs at least one level".into()))?;
    if levels.len() != scores.len() {
        return Err(Error::shape("one score list per level is required"));
    }
    let (w, h) = (first.width, first.height);
    let mut acc = vec![0.0; w * h];
    for (level, s) in levels.iter().zip(scores) {
        if (level.width, level.height) != (w, h) || s.len() != level.segments.len() {
            return Err(Error::shape("level dims or score count mismatch"));
        }
        for (a, &l) in acc.iter_mut().zip(&level.labels) {
            *a += s[l as usize];
        }
    }
    let n = levels.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(SaliencyMap::new(GrayMap::new(w, h, acc)?, MapSource::SegmentStream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::LevelParams;

    fn level_from(width: usize, height: usize, labels: Vec<u32>) -> SegmentationLevel {
        let p = LevelParams { k: 1.0, min_size: 1, sigma: 0.0 };
        SegmentationLevel::from_labels(width, height, labels, p).unwrap()
    }

    #[test]
    fn default_geometry_is_stride_8_offset_3_5() {
        let spec = NetworkSpec::default();
        assert_eq!(rf_geometry(&spec), (8, 3.5));
        let rf = project_rf_centers(&spec, 64, 64);
        assert_eq!((rf.fm_h, rf.fm_w), (8, 8));
        assert_eq!(rf.center(2, 5), (19.5, 43.5));
        assert!(rf.counts.iter().all(|&c| c == 64));
        assert_eq!(rf.counts.iter().sum::<usize>(), 64 * 64);
        // A pixel next to a centre lands in that centre's cell.
        assert_eq!(rf.assignment[19 * 64 + 43], 2 * 8 + 5);
    }

    #[test]
    fn whole_image_segment_mask_is_full() {
        let spec = NetworkSpec::default();
        let rf = project_rf_centers(&spec, 64, 64);
        let level = level_from(64, 64, vec![0; 64 * 64]);
        let mask = backproject_segment_mask(&level.segments[0], &rf);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn small_segment_falls_back_to_nonzero_ratio() {
        let spec = NetworkSpec::default();
        let rf = project_rf_centers(&spec, 64, 64);
        let mut labels = vec![0u32; 64 * 64];
        for (y, x) in [(10, 10), (10, 11), (11, 10), (11, 11)] {
            labels[y * 64 + x] = 1;
        }
        let level = level_from(64, 64, labels);
        let mask = backproject_segment_mask(&level.segments[1], &rf);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(mask[8 + 1]);
        // The surrounding segment still owns that location by majority.
        let big = backproject_segment_mask(&level.segments[0], &rf);
        assert!(big.iter().all(|&m| m));
    }

    #[test]
    fn straddling_segments_overlap_only_on_shared_cells() {
        let spec = NetworkSpec::default();
        let rf = project_rf_centers(&spec, 64, 64);
        // Left segment covers columns 0..=19: cell column 2 holds 4 of its 8 columns.
        let labels = (0..64 * 64).map(|i| u32::from(i % 64 >= 20)).collect();
        let level = level_from(64, 64, labels);
        let a = backproject_segment_mask(&level.segments[0], &rf);
        let b = backproject_segment_mask(&level.segments[1], &rf);
        for loc in 0..64 {
            if a[loc] && b[loc] {
                assert_eq!(loc % 8, 2);
            }
        }
        assert!(a[2] && b[2]);
    }

    #[test]
    fn pooling_examples() {
        let fm: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let region = BoundingBox { min_row: 0, min_col: 0, max_row: 3, max_col: 3 };
        let all = vec![true; 16];
        assert_eq!(spatial_pool(&fm, 1, 4, &region, &all, 2, 2, PoolMode::Max), vec![5.0, 7.0, 13.0, 15.0]);

        let mut single = vec![false; 16];
        single[6] = true;
        assert_eq!(spatial_pool(&fm, 1, 4, &region, &single, 2, 2, PoolMode::Max), vec![0.0, 6.0, 0.0, 0.0]);

        let c = vec![2.5; 16];
        assert_eq!(spatial_pool(&c, 1, 4, &region, &all, 2, 2, PoolMode::Mean), vec![2.5; 4]);

        // A 1x1 region replicates into every cell.
        let dot = BoundingBox { min_row: 1, min_col: 1, max_row: 1, max_col: 1 };
        assert_eq!(spatial_pool(&fm, 1, 4, &dot, &all, 2, 2, PoolMode::Max), vec![5.0; 4]);
    }

    #[test]
    fn mask_features_examples() {
        let fm: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        assert_eq!(mask_features(&fm, 2, &[true; 4]), fm);
        let m = mask_features(&fm, 2, &[false, true, false, false]);
        assert_eq!(m, vec![0.0, 2.0, 0.0, 0.0, 0.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn single_segment_descriptor_contexts() {
        let spec = NetworkSpec::default();
        let rf = project_rf_centers(&spec, 64, 64);
        let level = level_from(64, 64, vec![0; 64 * 64]);
        let fm = Tensor::from_fn(&[1, 3, 8, 8], |i| (i as f64 * 0.37).sin() + 1.5);
        let view = FeatureView::from_tensor(&fm).unwrap();
        let d = build_descriptor(&level.segments[0], &level, 0, view, &rf, PoolMode::Max).unwrap();
        let cl = GRID_H * GRID_W * 3;
        assert_eq!(d.features.len(), descriptor_len(3));
        assert_eq!(d.features[..cl], d.features[cl..2 * cl]);
        assert!(d.features[2 * cl..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_mlp_scores_half_and_identical_inputs_match() {
        let mut mlp = init_mlp(12, 4, 1).unwrap();
        let d = SegmentDescriptor { features: vec![0.3; 12], segment_id: 0, level_id: 0 };
        let s = score_segments(&[d.clone(), d.clone()], &mlp).unwrap();
        assert_eq!(s[0], s[1]);
        for t in mlp.tensors.values_mut() {
            t.data_mut().fill(0.0);
        }
        let s = score_segments(&[d], &mlp).unwrap();
        assert_eq!(s, vec![0.5]);
    }

    #[test]
    fn render_examples() {
        let a = level_from(2, 1, vec![0, 1]);
        let b = level_from(2, 1, vec![0, 0]);
        let c = level_from(2, 1, vec![0, 1]);
        let s = render_s2(&[a.clone(), b.clone(), c.clone()], &[vec![1.0, 1.0], vec![1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(s.map.data, vec![1.0, 1.0]);
        let s = render_s2(&[a, b, c], &[vec![1.0, 0.2], vec![0.0], vec![0.5, 0.1]]).unwrap();
        assert!((s.map.data[0] - 0.5).abs() < 1e-15);
    }
}
