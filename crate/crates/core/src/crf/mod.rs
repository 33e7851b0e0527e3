//! Contour-guided fully connected CRF.
//!
//! Binary labels, unary `−log P(l)` from a saliency map, and a pairwise Potts
//! term built from two Gaussian kernels: an appearance kernel over position,
//! colour and (optionally) a spectral embedding of the salient-contour map,
//! and a smoothness kernel over position only.

pub mod affinity;
pub mod eigen;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{GrayMap, MapSource, RgbImage, SaliencyMap};

pub use affinity::{bresenham_line, contour_affinity, SparseAffinity};
pub use eigen::{residual_norm, smallest_eigenpairs, Eigenpairs};

pub const EMBEDDING_DIM: usize = 16;
pub const AFFINITY_RADIUS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct CrfConfig {
    pub w1: f64,
    pub w2: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub sigma_gamma: f64,
    pub sigma_epsilon: f64,
    pub rho: f64,
    pub iterations: usize,
    /// Divide each kernel weight by the spatial mass of its window, so `w`
    /// is the total pull of a fully agreeing neighbourhood.
    pub normalize: bool,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            w1: 3.0,
            w2: 5.0,
            sigma_alpha: 3.0,
            sigma_beta: 50.0,
            sigma_gamma: 3.0,
            sigma_epsilon: 9.0,
            rho: 0.1,
            iterations: 10,
            normalize: true,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        let sig = [
            ("sigma_alpha", self.sigma_alpha),
            ("sigma_beta", self.sigma_beta),
            ("sigma_gamma", self.sigma_gamma),
            ("sigma_epsilon", self.sigma_epsilon),
            ("rho", self.rho),
        ];
        for (name, v) in sig {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("crf {name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("w1", self.w1), ("w2", self.w2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("crf {name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    fn radius(sigma: f64) -> usize {
        (3.0 * sigma).floor() as usize
    }

    /// `(w1, w2)` after optional normalization.
    pub fn effective_weights(&self) -> (f64, f64) {
        if !self.normalize {
            return (self.w1, self.w2);
        }
        let mass = |sigma: f64| {
            let r = Self::radius(sigma) as isize;
            let g: f64 = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).sum();
            g * g - 1.0
        };
        (self.w1 / mass(self.sigma_alpha), self.w2 / mass(self.sigma_epsilon))
    }
}

/// Per-pixel spectral features of a contour map.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourEmbedding {
    pub width: usize,
    pub height: usize,
    /// Ascending generalized eigenvalues.
    pub eigenvalues: Vec<f64>,
    /// Row-major `[pixel][component]`.
    pub features: Vec<f64>,
    pub dim: usize,
    pub warnings: Vec<String>,
}

impl ContourEmbedding {
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            eigenvalues: vec![0.0; dim],
            features: vec![0.0; width * height * dim],
            dim,
            warnings: Vec::new(),
        }
    }
}

/// Affinity graph of the contour map followed by its `dim` smallest
/// generalized eigenvectors.
pub fn contour_embedding(contour: &GrayMap, rho: f64, dim: usize) -> Result<ContourEmbedding> {
    let w = contour_affinity(contour, AFFINITY_RADIUS, rho);
    let pairs = smallest_eigenpairs(&w, dim.min(w.n))?;
    Ok(embedding_from_pairs(contour.width, contour.height, &pairs))
}

pub fn embedding_from_pairs(width: usize, height: usize, pairs: &Eigenpairs) -> ContourEmbedding {
    let n = width * height;
    let dim = pairs.values.len();
    let mut features = vec![0.0; n * dim];
    for (c, v) in pairs.vectors.iter().enumerate() {
        for (i, &x) in v.iter().enumerate() {
            features[i * dim + c] = x;
        }
    }
    ContourEmbedding {
        width,
        height,
        eigenvalues: pairs.values.clone(),
        features,
        dim,
        warnings: pairs.warnings.clone(),
    }
}

struct Inputs<'a> {
    s: &'a GrayMap,
    image: &'a RgbImage,
    embedding: Option<&'a ContourEmbedding>,
}

impl Inputs<'_> {
    fn check(&self) -> Result<()> {
        let dims = (self.s.width, self.s.height);
        if (self.image.width, self.image.height) != dims {
            return Err(Error::shape(format!(
                "image is {}x{}, saliency map {}x{}",
                self.image.width, self.image.height, dims.0, dims.1
            )));
        }
        if let Some(e) = self.embedding {
            if (e.width, e.height) != dims {
                return Err(Error::shape(format!(
                    "embedding is {}x{}, saliency map {}x{}",
                    e.width, e.height, dims.0, dims.1
                )));
            }
        }
        Ok(())
    }

    /// Appearance-kernel exponent without the spatial part.
    fn feature_dist(&self, cfg: &CrfConfig, i: usize, j: usize) -> f64 {
        let a = &self.image.data[3 * i..3 * i + 3];
        let b = &self.image.data[3 * j..3 * j + 3];
        let dc: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
        let mut e = dc / (2.0 * cfg.sigma_beta * cfg.sigma_beta);
        if let Some(emb) = self.embedding {
            let dv: f64 = emb.pixel(i).iter().zip(emb.pixel(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            e += dv / (2.0 * cfg.sigma_gamma * cfg.sigma_gamma);
        }
        e
    }

    /// Full pairwise weight `k(i, j)` without truncation.
    fn kernel(&self, cfg: &CrfConfig, w1: f64, w2: f64, i: usize, j: usize) -> f64 {
        let w = self.s.width;
        let dy = (i / w) as f64 - (j / w) as f64;
        let dx = (i % w) as f64 - (j % w) as f64;
        let dp = dx * dx + dy * dy;
        let mut k = 0.0;
        if w1 > 0.0 {
            k += w1 * (-dp / (2.0 * cfg.sigma_alpha * cfg.sigma_alpha) - self.feature_dist(cfg, i, j)).exp();
        }
        if w2 > 0.0 {
            k += w2 * (-dp / (2.0 * cfg.sigma_epsilon * cfg.sigma_epsilon)).exp();
        }
        k
    }
}

/// `E(L) = −Σ log P(l_i) + Σ_{i<j} μ(l_i, l_j) k(i, j)`, with untruncated
/// kernels.
pub fn crf_energy(
    labels: &[u8],
    s: &GrayMap,
    image: &RgbImage,
    embedding: Option<&ContourEmbedding>,
    cfg: &CrfConfig,
) -> Result<f64> {
    let inputs = Inputs { s, image, embedding };
    inputs.check()?;
    if labels.len() != s.data.len() {
        return Err(Error::shape("labeling size does not match the map"));
    }
    let (w1, w2) = cfg.effective_weights();
    let mut e = 0.0;
    for (&l, &p) in labels.iter().zip(&s.data) {
        e -= if l == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] != labels[j] {
                e += inputs.kernel(cfg, w1, w2, i, j);
            }
        }
    }
    Ok(e)
}

/// Separable 1-D Gaussian pass with zero padding; `horizontal` picks the axis.
fn gauss_pass(src: &[f64], width: usize, height: usize, taps: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, &g) in taps.iter().enumerate() {
                let o = t as isize - r;
                let (yy, xx) = if horizontal { (y as isize, x as isize + o) } else { (y as isize + o, x as isize) };
                if yy >= 0 && yy < height as isize && xx >= 0 && xx < width as isize {
                    acc += g * src[yy as usize * width + xx as usize];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Mean-field posterior of the salient label.
///
/// Updates are parallel (Jacobi): every pixel reads the previous iteration's
/// marginals. Messages are summed directly over a `(2r+1)²` window with
/// `r = ⌊3σ⌋` per kernel; the smoothness kernel is applied separably.
pub fn mean_field_infer(
    s: &GrayMap,
    image: &RgbImage,
    embedding: Option<&ContourEmbedding>,
    cfg: &CrfConfig,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    let inputs = Inputs { s, image, embedding };
    inputs.check()?;
    let (w, h) = (s.width, s.height);
    let (w1, w2) = cfg.effective_weights();
    let unary: Vec<f64> = s.data.iter().map(|&p| p.ln() - (1.0 - p).ln()).collect();
    let mut q = s.data.clone();
    if w1 == 0.0 && w2 == 0.0 {
        return Ok(SaliencyMap::new(s.clone(), MapSource::CrfRefined));
    }

    // Appearance-kernel neighbour lists, built once.
    let r1 = CrfConfig::radius(cfg.sigma_alpha) as isize;
    let appearance: Vec<Vec<(usize, f64)>> = if w1 > 0.0 {
        (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (yi, xi) = ((i / w) as isize, (i % w) as isize);
                let mut out = Vec::new();
                for dy in -r1..=r1 {
                    for dx in -r1..=r1 {
                        let (y, x) = (yi + dy, xi + dx);
                        if (dy == 0 && dx == 0) || y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            continue;
                        }
                        let j = y as usize * w + x as usize;
                        let dp = (dx * dx + dy * dy) as f64;
                        let e = dp / (2.0 * cfg.sigma_alpha * cfg.sigma_alpha) + inputs.feature_dist(cfg, i, j);
                        out.push((j, w1 * (-e).exp()));
                    }
                }
                out
            })
            .collect()
    } else {
        Vec::new()
    };
    let r2 = CrfConfig::radius(cfg.sigma_epsilon) as isize;
    let taps: Vec<f64> = (-r2..=r2)
        .map(|d| (-(d * d) as f64 / (2.0 * cfg.sigma_epsilon * cfg.sigma_epsilon)).exp())
        .collect();

    for _ in 0..cfg.iterations {
        // Label-1 minus label-0 agreement: Σ_j k_ij (Q_j(1) − Q_j(0)).
        let m: Vec<f64> = q.iter().map(|&p| 2.0 * p - 1.0).collect();
        let smooth = if w2 > 0.0 {
            let hpass = gauss_pass(&m, w, h, &taps, true);
            gauss_pass(&hpass, w, h, &taps, false)
        } else {
            vec![0.0; m.len()]
        };
        q = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let mut msg = 0.0;
                if w1 > 0.0 {
                    msg += appearance[i].iter().map(|&(j, k)| k * m[j]).sum::<f64>();
                }
                if w2 > 0.0 {
                    msg += w2 * (smooth[i] - m[i]);
                }
                let a = unary[i] + msg;
                1.0 / (1.0 + (-a).exp())
            })
            .collect();
    }
    Ok(SaliencyMap::new(GrayMap::new(w, h, q)?, MapSource::CrfRefined))
}

/// Thresholds a posterior at 0.5.
pub fn binarize(posterior: &GrayMap) -> Vec<u8> {
    posterior.data.iter().map(|&p| u8::from(p >= 0.5)).collect()
}
