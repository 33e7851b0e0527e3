//! Graph-based image segmentation (Felzenszwalb–Huttenlocher) at several
//! granularities.
//!
//! Pixels are nodes of an 8-connected grid graph whose edge weights are
//! Euclidean distances between Gaussian-smoothed RGB values. Edges are
//! visited in ascending weight order and two components merge when the edge
//! is no heavier than either component's internal difference plus `k / |C|`.
//! A final pass merges components smaller than `min_size`.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::image::{BinaryMap, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelParams {
    pub k: f64,
    pub min_size: usize,
    pub sigma: f64,
}

/// Inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BoundingBox {
    pub fn point(row: usize, col: usize) -> Self {
        Self {
            min_row: row,
            min_col: col,
            max_row: row,
            max_col: col,
        }
    }

    pub fn include(&mut self, row: usize, col: usize) {
        self.min_row = self.min_row.min(row);
        self.min_col = self.min_col.min(col);
        self.max_row = self.max_row.max(row);
        self.max_col = self.max_col.max(col);
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            min_row: self.min_row.min(other.min_row),
            min_col: self.min_col.min(other.min_col),
            max_row: self.max_row.max(other.max_row),
            max_col: self.max_col.max(other.max_col),
        }
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.min_row <= other.min_row
            && self.min_col <= other.min_col
            && self.max_row >= other.max_row
            && self.max_col >= other.max_col
    }

    pub fn height(&self) -> usize {
        self.max_row - self.min_row + 1
    }

    pub fn width(&self) -> usize {
        self.max_col - self.min_col + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub id: usize,
    /// Flat pixel indices (`row * width + col`), ascending.
    pub pixels: Vec<usize>,
    pub bbox: BoundingBox,
    /// Ids of segments sharing an 8-neighbour pixel pair, ascending.
    pub neighbors: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationLevel {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub segments: Vec<Segment>,
    pub params: LevelParams,
}

impl SegmentationLevel {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Builds segments, boxes and adjacency from a contiguous label map.
    pub fn from_labels(width: usize, height: usize, labels: Vec<u32>, params: LevelParams) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape("label map size does not match image"));
        }
        let n = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut boxes: Vec<Option<BoundingBox>> = vec![None; n];
        for (i, &l) in labels.iter().enumerate() {
            let (r, c) = (i / width, i % width);
            pixels[l as usize].push(i);
            match &mut boxes[l as usize] {
                Some(b) => b.include(r, c),
                slot => *slot = Some(BoundingBox::point(r, c)),
            }
        }
        if let Some(missing) = boxes.iter().position(Option::is_none) {
            return Err(Error::InvalidArgument(format!("labels are not contiguous: {missing} unused")));
        }
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (a, b) in grid_edges(width, height) {
            let (la, lb) = (labels[a] as usize, labels[b] as usize);
            if la != lb {
                adj[la].insert(lb);
                adj[lb].insert(la);
            }
        }
        let segments = pixels
            .into_iter()
            .zip(boxes)
            .zip(adj)
            .enumerate()
            .map(|(id, ((pixels, bbox), nb))| Segment {
                id,
                pixels,
                bbox: bbox.expect("checked"),
                neighbors: nb.into_iter().collect(),
            })
            .collect();
        Ok(Self {
            width,
            height,
            labels,
            segments,
            params,
        })
    }
}

/// 8-connected grid edges, each listed once, in raster order.
fn grid_edges(width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..height).flat_map(move |y| {
        (0..width).flat_map(move |x| {
            let i = y * width + x;
            let mut e = [None; 4];
            if x + 1 < width {
                e[0] = Some((i, i + 1));
            }
            if y + 1 < height {
                e[1] = Some((i, i + width));
                if x + 1 < width {
                    e[2] = Some((i, i + width + 1));
                }
                if x > 0 {
                    e[3] = Some((i, i + width - 1));
                }
            }
            e.into_iter().flatten()
        })
    })
}

/// Separable Gaussian blur of planar channels with edge clamping.
fn smooth(planes: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return planes.to_vec();
    }
    let radius = (sigma * 4.0).ceil() as isize + 1;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);
    let n = width * height;
    let mut tmp = vec![0.0; planes.len()];
    let mut out = vec![0.0; planes.len()];
    for c in 0..planes.len() / n {
        let src = &planes[c * n..(c + 1) * n];
        let t = &mut tmp[c * n..(c + 1) * n];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (ki, d) in (-radius..=radius).enumerate() {
                    let sx = (x as isize + d).clamp(0, width as isize - 1) as usize;
                    acc += kernel[ki] * src[y * width + sx];
                }
                t[y * width + x] = acc;
            }
        }
        let o = &mut out[c * n..(c + 1) * n];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (ki, d) in (-radius..=radius).enumerate() {
                    let sy = (y as isize + d).clamp(0, height as isize - 1) as usize;
                    acc += kernel[ki] * t[sy * width + x];
                }
                o[y * width + x] = acc;
            }
        }
    }
    out
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    threshold: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize, k: f64) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            threshold: vec![k; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins two roots; the larger one (ties: smaller index) stays root.
    fn join(&mut self, a: usize, b: usize) -> usize {
        let (root, child) = if self.size[a] > self.size[b] || (self.size[a] == self.size[b] && a < b) {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[child] = root;
        self.size[root] += self.size[child];
        root
    }
}

/// Segments one image. Deterministic: ties in edge weight keep raster order.
pub fn felzenszwalb_segment(image: &RgbImage, params: LevelParams) -> Result<SegmentationLevel> {
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("cannot segment an empty image".into()));
    }
    let n = w * h;
    let planes = smooth(&image.planes(), w, h, params.sigma);
    let dist = |a: usize, b: usize| -> f64 {
        (0..3)
            .map(|c| {
                let d = planes[c * n + a] - planes[c * n + b];
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut edges: Vec<(f64, usize, usize)> = grid_edges(w, h).map(|(a, b)| (dist(a, b), a, b)).collect();
    edges.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut ds = DisjointSet::new(n, params.k);
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && wt <= ds.threshold[ra] && wt <= ds.threshold[rb] {
            let root = ds.join(ra, rb);
            ds.threshold[root] = wt + params.k / ds.size[root] as f64;
        }
    }
    for &(_, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && (ds.size[ra] < params.min_size || ds.size[rb] < params.min_size) {
            ds.join(ra, rb);
        }
    }

    let mut remap = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let r = ds.find(i);
        if remap[r] == u32::MAX {
            remap[r] = next;
            next += 1;
        }
        labels.push(remap[r]);
    }
    SegmentationLevel::from_labels(w, h, labels, params)
}

/// Default level parameters for 64×64 inputs, finest first.
pub fn default_levels() -> [LevelParams; 3] {
    [
        LevelParams {
            k: 15.0,
            min_size: 8,
            sigma: 0.8,
        },
        LevelParams {
            k: 25.0,
            min_size: 12,
            sigma: 0.8,
        },
        LevelParams {
            k: 50.0,
            min_size: 20,
            sigma: 0.8,
        },
    ]
}

/// Three independent segmentations of the same image.
pub fn multi_level_segment(image: &RgbImage, params: &[LevelParams]) -> Result<Vec<SegmentationLevel>> {
    if params.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "multi-level segmentation needs 3 parameter triples, got {}",
            params.len()
        )));
    }
    params.iter().map(|&p| felzenszwalb_segment(image, p)).collect()
}

/// 1 when more than half of the segment's pixels are salient.
pub fn segment_saliency_label(segment: &Segment, gt: &BinaryMap) -> u8 {
    let ones = segment.pixels.iter().filter(|&&i| gt.data[i] == 1).count();
    u8::from(2 * ones > segment.pixels.len())
}
