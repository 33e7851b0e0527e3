//! Saliency metrics: PR curve over 256 integer thresholds, F-measure,
//! adaptive-threshold F-measure and mean absolute error.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{BinaryMap, GrayMap};

pub const BETA_SQ: f64 = 0.3;
pub const THRESHOLDS: usize = 256;

/// Dataset-averaged precision and recall at thresholds `0..=255`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    pub fn f_measures(&self) -> Vec<f64> {
        self.precision
            .iter()
            .zip(&self.recall)
            .map(|(&p, &r)| f_measure(p, r, BETA_SQ))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f\n");
        for (t, f) in self.f_measures().iter().enumerate() {
            let _ = writeln!(s, "{t},{},{},{}", self.precision[t], self.recall[t], f);
        }
        s
    }
}

pub fn f_measure(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let den = beta_sq * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / den
    }
}

pub fn max_f(curve: &PrCurve) -> f64 {
    curve.f_measures().into_iter().fold(0.0, f64::max)
}

/// Quantizes a `[0, 1]` map to `0..=255` the same way it is written to disk.
pub fn quantize(map: &GrayMap) -> Vec<u8> {
    map.to_u8()
}

fn check_dims(map: &GrayMap, gt: &BinaryMap, index: usize) -> Result<()> {
    if (map.width, map.height) != (gt.width, gt.height) {
        return Err(Error::shape(format!(
            "image {index}: prediction is {}x{}, mask is {}x{}",
            map.width, map.height, gt.width, gt.height
        )));
    }
    Ok(())
}

/// Precision (1 when nothing is predicted) and recall for one binarization.
fn pr(tp: usize, predicted: usize, positives: usize) -> (f64, f64) {
    let p = if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 };
    let r = if positives == 0 { 1.0 } else { tp as f64 / positives as f64 };
    (p, r)
}

/// Per-image curve: a pixel is salient at threshold `t` when its quantized
/// value is `>= t`. Cumulative histograms make this one pass per image.
pub fn image_pr(map: &GrayMap, gt: &BinaryMap) -> (Vec<f64>, Vec<f64>) {
    let q = quantize(map);
    let mut pos_hist = [0usize; THRESHOLDS];
    let mut all_hist = [0usize; THRESHOLDS];
    for (&v, &g) in q.iter().zip(&gt.data) {
        all_hist[v as usize] += 1;
        if g == 1 {
            pos_hist[v as usize] += 1;
        }
    }
    let positives = gt.count_ones();
    let (mut tp, mut predicted) = (0, 0);
    let mut precision = vec![0.0; THRESHOLDS];
    let mut recall = vec![0.0; THRESHOLDS];
    for t in (0..THRESHOLDS).rev() {
        tp += pos_hist[t];
        predicted += all_hist[t];
        (precision[t], recall[t]) = pr(tp, predicted, positives);
    }
    (precision, recall)
}

pub fn pr_curve(maps: &[GrayMap], gts: &[BinaryMap]) -> Result<PrCurve> {
    if maps.len() != gts.len() {
        return Err(Error::shape(format!("{} maps but {} masks", maps.len(), gts.len())));
    }
    if maps.is_empty() {
        return Err(Error::InvalidArgument("pr_curve needs at least one image".into()));
    }
    let mut precision = vec![0.0; THRESHOLDS];
    let mut recall = vec![0.0; THRESHOLDS];
    for (i, (m, g)) in maps.iter().zip(gts).enumerate() {
        check_dims(m, g, i)?;
        let (p, r) = image_pr(m, g);
        for t in 0..THRESHOLDS {
            precision[t] += p[t];
            recall[t] += r[t];
        }
    }
    let n = maps.len() as f64;
    precision.iter_mut().chain(recall.iter_mut()).for_each(|v| *v /= n);
    Ok(PrCurve { precision, recall })
}

/// Binarizes at `min(2·mean, max)` and returns `(P, R, F)` for one image.
pub fn image_adaptive_prf(map: &GrayMap, gt: &BinaryMap) -> (f64, f64, f64) {
    let mean = map.data.iter().sum::<f64>() / map.data.len() as f64;
    let max = map.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let thr = (2.0 * mean).min(max);
    let (mut tp, mut predicted) = (0, 0);
    for (&v, &g) in map.data.iter().zip(&gt.data) {
        if v >= thr {
            predicted += 1;
            if g == 1 {
                tp += 1;
            }
        }
    }
    let (p, r) = pr(tp, predicted, gt.count_ones());
    (p, r, f_measure(p, r, BETA_SQ))
}

/// Dataset-averaged adaptive-threshold precision, recall and F.
pub fn adaptive_threshold_prf(maps: &[GrayMap], gts: &[BinaryMap]) -> Result<(f64, f64, f64)> {
    if maps.len() != gts.len() || maps.is_empty() {
        return Err(Error::shape(format!("{} maps but {} masks", maps.len(), gts.len())));
    }
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for (i, (m, g)) in maps.iter().zip(gts).enumerate() {
        check_dims(m, g, i)?;
        let (p, r, f) = image_adaptive_prf(m, g);
        ps += p;
        rs += r;
        fs += f;
    }
    let n = maps.len() as f64;
    Ok((ps / n, rs / n, fs / n))
}

pub fn image_mae(map: &GrayMap, gt: &BinaryMap) -> f64 {
    map.data
        .iter()
        .zip(&gt.data)
        .map(|(&s, &g)| (s - g as f64).abs())
        .sum::<f64>()
        / map.data.len() as f64
}

/// Dataset mean of per-image MAE.
pub fn mae(maps: &[GrayMap], gts: &[BinaryMap]) -> Result<f64> {
    if maps.len() != gts.len() || maps.is_empty() {
        return Err(Error::shape(format!("{} maps but {} masks", maps.len(), gts.len())));
    }
    let mut total = 0.0;
    for (i, (m, g)) in maps.iter().zip(gts).enumerate() {
        check_dims(m, g, i)?;
        total += image_mae(m, g);
    }
    Ok(total / maps.len() as f64)
}

/// Mean absolute difference between two maps.
pub fn map_distance(a: &GrayMap, b: &GrayMap) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape("maps differ in size"));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64)
}

/// Summary metrics of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub max_f: f64,
    pub adaptive_precision: f64,
    pub adaptive_recall: f64,
    pub adaptive_f: f64,
    pub mae: f64,
    pub curve: PrCurve,
}

pub fn evaluate_maps(maps: &[GrayMap], gts: &[BinaryMap]) -> Result<Metrics> {
    let curve = pr_curve(maps, gts)?;
    let (p, r, f) = adaptive_threshold_prf(maps, gts)?;
    Ok(Metrics {
        max_f: max_f(&curve),
        adaptive_precision: p,
        adaptive_recall: r,
        adaptive_f: f,
        mae: mae(maps, gts)?,
        curve,
    })
}

/// One metric row per line: `dataset,variant,metric,value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<(String, String, String, f64)>,
}

impl MetricTable {
    pub fn push(&mut self, dataset: &str, variant: &str, m: &Metrics) {
        for (name, v) in [
            ("maxF", m.max_f),
            ("adaptive_precision", m.adaptive_precision),
            ("adaptive_recall", m.adaptive_recall),
            ("adaptive_F", m.adaptive_f),
            ("MAE", m.mae),
        ] {
            self.rows.push((dataset.into(), variant.into(), name.into(), v));
        }
    }

    pub fn get(&self, variant: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.1 == variant && r.2 == metric).map(|r| r.3)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,variant,metric,value\n");
        for (d, v, m, x) in &self.rows {
            // `{:?}` prints the shortest representation that parses back exactly.
            let _ = writeln!(s, "{d},{v},{m},{x:?}");
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::format("metrics csv", format!("line {}: expected 4 fields", i + 1)));
            }
            let v = parts[3]
                .parse()
                .map_err(|_| Error::format("metrics csv", format!("line {}: bad number {:?}", i + 1, parts[3])))?;
            rows.push((parts[0].into(), parts[1].into(), parts[2].into(), v));
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_mask(w: usize, h: usize) -> BinaryMap {
        BinaryMap::new(w, h, (0..w * h).map(|i| u8::from(i % w < w / 2)).collect()).unwrap()
    }

    #[test]
    fn f_measure_examples() {
        assert_eq!(f_measure(1.0, 1.0, BETA_SQ), 1.0);
        assert!((f_measure(0.37, 0.37, BETA_SQ) - 0.37).abs() < 1e-15);
        assert!((f_measure(0.8, 0.4, BETA_SQ) - 0.65).abs() < 1e-12);
        assert_eq!(f_measure(0.0, 0.0, BETA_SQ), 0.0);
    }

    #[test]
    fn perfect_prediction_curve() {
        let gt = half_mask(6, 4);
        let map = gt.to_gray();
        let c = pr_curve(&[map], &[gt]).unwrap();
        for t in 1..256 {
            assert_eq!((c.precision[t], c.recall[t]), (1.0, 1.0));
        }
        assert_eq!(c.precision[0], 0.5);
        assert_eq!(max_f(&c), 1.0);
    }

    #[test]
    fn saturated_prediction_on_half_mask() {
        let gt = half_mask(8, 2);
        let map = GrayMap::filled(8, 2, 1.0);
        let c = pr_curve(&[map], &[gt]).unwrap();
        assert!(c.precision.iter().all(|&p| p == 0.5));
        assert!(c.recall.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn adaptive_threshold_examples() {
        let gt = half_mask(4, 1);
        // mean 0.2 → threshold 0.4
        let map = GrayMap::new(4, 1, vec![0.45, 0.35, 0.0, 0.0]).unwrap();
        let (p, r, _) = image_adaptive_prf(&map, &gt);
        assert_eq!((p, r), (1.0, 0.5));
        // constant map → every pixel salient
        let map = GrayMap::filled(4, 1, 0.3);
        let (p, r, _) = image_adaptive_prf(&map, &gt);
        assert_eq!((p, r), (0.5, 1.0));
    }

    #[test]
    fn mae_examples() {
        let gt = BinaryMap::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(image_mae(&gt.to_gray(), &gt), 0.0);
        let z = BinaryMap::zeros(2, 2);
        assert_eq!(image_mae(&GrayMap::filled(2, 2, 0.5), &z), 0.5);
        let map = GrayMap::new(2, 2, vec![0.9, 0.2, 0.0, 0.6]).unwrap();
        assert!((image_mae(&map, &gt) - (0.1 + 0.2 + 0.0 + 0.4) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_names_the_image() {
        let err = pr_curve(&[GrayMap::filled(2, 2, 0.0), GrayMap::filled(3, 2, 0.0)], &[BinaryMap::zeros(2, 2), BinaryMap::zeros(2, 2)])
            .unwrap_err();
        assert!(err.to_string().contains("image 1"));
    }

    #[test]
    fn csv_round_trip() {
        let gt = half_mask(4, 4);
        let map = GrayMap::new(4, 4, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        let m = evaluate_maps(&[map], &[gt]).unwrap();
        let mut t = MetricTable::default();
        t.push("synth", "fused", &m);
        assert_eq!(MetricTable::parse_csv(&t.to_csv()).unwrap(), t);
        assert_eq!(m.curve.to_csv().lines().count(), 257);
    }
}
