//! Datasets: manifests on disk and the synthetic shapes corpus.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{self, BinaryMap, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Image/mask pairs. Paths are stored relative to `root`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<(PathBuf, PathBuf)>,
    pub split: Split,
}

/// A decoded dataset entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: RgbImage,
    pub mask: BinaryMap,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Text form: an optional `# split: NAME` line, then one
    /// `image<TAB>mask` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = format!("# split: {}\n", self.split);
        for (img, mask) in &self.entries {
            out.push_str(&format!("{}\t{}\n", img.display(), mask.display()));
        }
        out
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut split = Split::Train;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(s) = comment.trim().strip_prefix("split:") {
                    split = s.trim().parse()?;
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    entries.push((PathBuf::from(a), PathBuf::from(b)))
                }
                _ => {
                    return Err(Error::Config {
                        line: i + 1,
                        message: "manifest lines must be `image<TAB>mask`".into(),
                    })
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            split,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &root)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Loads every entry, checking that image and mask sizes agree.
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|(img, mask)| {
                let ip = self.root.join(img);
                let mp = self.root.join(mask);
                let image = image::read_rgb(&ip)?;
                let mask = image::read_mask(&mp)?;
                if (image.width, image.height) != (mask.width, mask.height) {
                    return Err(Error::Dataset {
                        path: ip,
                        message: format!(
                            "image is {}x{} but mask is {}x{}",
                            image.width, image.height, mask.width, mask.height
                        ),
                    });
                }
                let name = img
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(Sample { name, image, mask })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Blob { cx: f64, cy: f64, r: f64, amps: [f64; 3], phases: [f64; 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                (c * dx + s * dy).abs() <= hw && (-s * dx + c * dy).abs() <= hh
            }
            Shape::Blob { cx, cy, r, amps, phases } => {
                let (dx, dy) = (x - cx, y - cy);
                let theta = dy.atan2(dx);
                let mut radius = r;
                for (i, (a, p)) in amps.iter().zip(phases).enumerate() {
                    radius += a * r * ((i as f64 + 2.0) * theta + p).sin();
                }
                dx * dx + dy * dy <= radius * radius
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Draws one image of 1–3 contrasting shapes on a textured background.
pub fn synth_sample(rng: &mut ChaCha8Rng, width: usize, height: usize) -> (RgbImage, BinaryMap) {
    loop {
        let (img, mask) = synth_attempt(rng, width, height);
        let ones = mask.count_ones();
        if ones > 0 && ones < width * height {
            return (img, mask);
        }
    }
}

fn synth_attempt(rng: &mut ChaCha8Rng, width: usize, height: usize) -> (RgbImage, BinaryMap) {
    let (wf, hf) = (width as f64, height as f64);
    let scale = wf.min(hf);
    let bg_a = random_color(rng);
    let mut bg_b = random_color(rng);
    while color_distance(bg_a, bg_b) > 90.0 {
        bg_b = random_color(rng);
    }
    let freq = [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)];
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let bg_noise = rng.gen_range(4.0..16.0);

    let n_shapes = rng.gen_range(1..=3);
    let mut shapes = Vec::with_capacity(n_shapes);
    let mut colors = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let cx = rng.gen_range(0.2..0.8) * wf;
        let cy = rng.gen_range(0.2..0.8) * hf;
        let size = rng.gen_range(0.09..0.24) * scale / (n_shapes as f64).sqrt() * 1.4;
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let shape = match rng.gen_range(0..3) {
            0 => Shape::Ellipse {
                cx,
                cy,
                rx: size * rng.gen_range(0.8..1.5),
                ry: size * rng.gen_range(0.6..1.2),
                angle,
            },
            1 => Shape::Rect {
                cx,
                cy,
                hw: size * rng.gen_range(0.7..1.4),
                hh: size * rng.gen_range(0.6..1.2),
                angle,
            },
            _ => Shape::Blob {
                cx,
                cy,
                r: size * 1.1,
                amps: [rng.gen_range(0.0..0.2), rng.gen_range(0.0..0.15), rng.gen_range(0.0..0.1)],
                phases: [
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                ],
            },
        };
        let mut fg = random_color(rng);
        while color_distance(fg, bg_a).min(color_distance(fg, bg_b)) < 120.0 {
            fg = random_color(rng);
        }
        shapes.push(shape);
        colors.push(fg);
    }
    let fg_noise = rng.gen_range(2.0..10.0);

    let mut img = RgbImage::filled(width, height, [0, 0, 0]);
    let mut mask = BinaryMap::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = shapes.iter().rposition(|s| s.contains(xf, yf));
            let rgb = match inside {
                Some(i) => {
                    mask.data[y * width + x] = 1;
                    let shade = 1.0 + 0.08 * ((xf + yf) / scale * 6.0).sin();
                    colors[i].map(|c| c * shade + rng.gen_range(-fg_noise..fg_noise))
                }
                None => {
                    let t = 0.5
                        + 0.5
                            * (freq[0] * xf / wf * std::f64::consts::TAU + freq[1] * yf / hf * std::f64::consts::TAU
                                + phase)
                                .sin();
                    let mut c = [0.0; 3];
                    for ch in 0..3 {
                        c[ch] = bg_a[ch] * (1.0 - t) + bg_b[ch] * t + rng.gen_range(-bg_noise..bg_noise);
                    }
                    c
                }
            };
            img.set_pixel(x, y, rgb.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    (img, mask)
}

/// Added to the training seed to draw the held-out split.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

/// In-memory corpus of `n` samples; identical for identical seeds.
pub fn synthetic_samples(n: usize, seed: u64, width: usize, height: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (image, mask) = synth_sample(&mut rng, width, height);
            Sample {
                name: format!("synth_{i:05}"),
                image,
                mask,
            }
        })
        .collect()
}

/// Writes `n` synthetic samples as PPM/PGM files plus `manifest.txt` under
/// `out_dir`, and returns the manifest.
pub fn generate_synthetic_dataset(
    n: usize,
    seed: u64,
    out_dir: &Path,
    size: (usize, usize),
    split: Split,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n);
    for s in synthetic_samples(n, seed, size.0, size.1) {
        let img = PathBuf::from(format!("{}.ppm", s.name));
        let mask = PathBuf::from(format!("{}_mask.pgm", s.name));
        image::write_rgb(&out_dir.join(&img), &s.image)?;
        image::write_mask(&out_dir.join(&mask), &s.mask)?;
        entries.push((img, mask));
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        split,
    };
    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_roundtrip() {
        let m = DatasetManifest {
            root: PathBuf::from("/data"),
            entries: vec![(PathBuf::from("a.ppm"), PathBuf::from("a.pgm"))],
            split: Split::Test,
        };
        let parsed = DatasetManifest::parse(&m.to_text(), Path::new("/data")).unwrap();
        assert_eq!(parsed, m);
        assert!(DatasetManifest::parse("only-one-column\n", Path::new(".")).is_err());
    }

    #[test]
    fn samples_are_deterministic_and_nonempty() {
        let a = synthetic_samples(6, 42, 64, 64);
        let b = synthetic_samples(6, 42, 64, 64);
        assert_eq!(a, b);
        for s in &a {
            assert!(s.mask.count_ones() > 0);
            assert_eq!((s.image.width, s.image.height), (s.mask.width, s.mask.height));
        }
        assert_ne!(a, synthetic_samples(6, 43, 64, 64));
    }
}
