//! In-memory images, maps and masks, plus binary PGM/PPM I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, Tensor};

/// 8-bit RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "RGB image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, H, W]` copy with values in `0..=255`.
    pub fn planes(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f64;
            }
        }
        out
    }

    /// Network input tensor `[1, 3, H, W]`, scaled to roughly `[-1, 1]`.
    pub fn to_input_tensor(&self) -> Tensor {
        let data = self.planes().into_iter().map(|v| v / 127.5 - 1.0).collect();
        Tensor::new(vec![1, 3, self.height, self.width], data).expect("consistent dims")
    }

    pub fn from_planes(width: usize, height: usize, planes: &[f64]) -> Self {
        let n = width * height;
        let mut data = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[i * 3 + c] = planes[c * n + i].round().clamp(0.0, 255.0) as u8;
            }
        }
        Self { width, height, data }
    }

    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let t = Tensor::new(vec![1, 3, self.height, self.width], self.planes())?;
        let r = bilinear_resize(&t, height, width)?;
        Ok(Self::from_planes(width, height, r.data()))
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Reflection-pads right and bottom so both dims become multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        if (w, h) == (self.width, self.height) {
            return self.clone();
        }
        let mut out = Self::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            let sy = reflect(y, self.height);
            for x in 0..w {
                out.set_pixel(x, y, self.pixel(reflect(x, self.width), sy));
            }
        }
        out
    }
}

/// Mirror index `i` into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Single-channel real-valued map.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "map {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone()).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.nchw()?;
        if n != 1 || c != 1 {
            return Err(Error::shape(format!("expected a [1,1,H,W] map, got {:?}", t.dims())));
        }
        Self::new(w, h, t.data().to_vec())
    }

    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        Self::from_tensor(&bilinear_resize(&self.to_tensor(), height, width)?)
    }

    pub fn crop(&self, width: usize, height: usize) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            data.extend_from_slice(&self.data[y * self.width..y * self.width + width]);
        }
        Self { width, height, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    /// Quantizes `[0, 1]` values to `0..=255`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Binary mask; every entry is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("binary mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    /// Binarizes 8-bit gray values at 128.
    pub fn from_gray_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| u8::from(b >= 128)).collect())
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_gray(&self) -> GrayMap {
        GrayMap {
            width: self.width,
            height: self.height,
            data: self.as_f64(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                data.push(self.data[sy.min(self.height - 1) * self.width + sx.min(self.width - 1)]);
            }
        }
        Self { width, height, data }
    }
}

/// Where a saliency map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MapSource {
    FullyConvolutional,
    SegmentStream,
    Fused,
    Contour,
    CrfRefined,
}

impl MapSource {
    pub fn name(self) -> &'static str {
        match self {
            MapSource::FullyConvolutional => "s1",
            MapSource::SegmentStream => "s2",
            MapSource::Fused => "fused",
            MapSource::Contour => "contour",
            MapSource::CrfRefined => "crf",
        }
    }
}

/// Map in `[0, 1]` at image resolution, tagged with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub map: GrayMap,
    pub source: MapSource,
}

impl SaliencyMap {
    pub fn new(map: GrayMap, source: MapSource) -> Self {
        Self { map, source }
    }
}

// ---------------------------------------------------------------------------
// Netpbm

/// Decoded binary netpbm payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pnm {
    Gray { width: usize, height: usize, data: Vec<u8> },
    Rgb(RgbImage),
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str, ctx: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(ctx, format!("missing {what} in header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(ctx, format!("{what} out of range")))
    }
}

/// Parses a binary P5 (gray) or P6 (RGB) file with maxval ≤ 255.
pub fn decode_pnm(bytes: &[u8], ctx: &str) -> Result<Pnm> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::format(ctx, "not a netpbm file"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        other => {
            return Err(Error::format(
                ctx,
                format!("unsupported netpbm variant P{}", other as char),
            ))
        }
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width", ctx)?;
    let height = r.number("height", ctx)?;
    let maxval = r.number("maxval", ctx)?;
    if width == 0 || height == 0 {
        return Err(Error::format(ctx, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(ctx, format!("maxval {maxval} unsupported (need 1..=255)")));
    }
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(Error::format(ctx, "missing whitespace after header"));
    }
    let start = r.pos + 1;
    let need = width * height * channels;
    if bytes.len() < start + need {
        return Err(Error::format(
            ctx,
            format!("truncated raster: need {need} bytes, have {}", bytes.len().saturating_sub(start)),
        ));
    }
    let mut data = bytes[start..start + need].to_vec();
    if maxval != 255 {
        for v in &mut data {
            *v = ((*v as usize * 255 + maxval / 2) / maxval).min(255) as u8;
        }
    }
    Ok(if channels == 1 {
        Pnm::Gray { width, height, data }
    } else {
        Pnm::Rgb(RgbImage { width, height, data })
    })
}

pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// 16-bit big-endian P5, used for label maps.
pub fn encode_pgm16(width: usize, height: usize, data: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Reads a colour image; grayscale files are replicated into three channels.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    match decode_pnm(&bytes, &path.display().to_string())? {
        Pnm::Rgb(img) => Ok(img),
        Pnm::Gray { width, height, data } => {
            let rgb = data.iter().flat_map(|&v| [v, v, v]).collect();
            RgbImage::new(width, height, rgb)
        }
    }
}

/// Reads an 8-bit gray image (P5), or the luma of a P6.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    match decode_pnm(&bytes, &path.display().to_string())? {
        Pnm::Gray { width, height, data } => Ok((width, height, data)),
        Pnm::Rgb(img) => {
            let data = img
                .data
                .chunks_exact(3)
                .map(|p| ((p[0] as u32 * 299 + p[1] as u32 * 587 + p[2] as u32 * 114 + 500) / 1000) as u8)
                .collect();
            Ok((img.width, img.height, data))
        }
    }
}

/// Reads a ground-truth mask, binarized at 128.
pub fn read_mask(path: &Path) -> Result<BinaryMap> {
    let (w, h, data) = read_gray(path)?;
    BinaryMap::from_gray_u8(w, h, &data)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_file(path, &encode_ppm(img))
}

pub fn write_gray(path: &Path, map: &GrayMap) -> Result<()> {
    write_file(path, &encode_pgm(map.width, map.height, &map.to_u8()))
}

pub fn write_mask(path: &Path, mask: &BinaryMap) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    write_file(path, &encode_pgm(mask.width, mask.height, &bytes))
}

pub fn write_labels16(path: &Path, width: usize, height: usize, labels: &[u32]) -> Result<()> {
    let data: Vec<u16> = labels.iter().map(|&l| l.min(u16::MAX as u32) as u16).collect();
    write_file(path, &encode_pgm16(width, height, &data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_roundtrip_and_comments() {
        let img = RgbImage::new(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(decode_pnm(&bytes, "t").unwrap(), Pnm::Rgb(img));

        let with_comment = b"P5\n# made by hand\n2 2\n255\n\x00\x10\x20\xff";
        match decode_pnm(with_comment, "t").unwrap() {
            Pnm::Gray { width, height, data } => {
                assert_eq!((width, height), (2, 2));
                assert_eq!(data, vec![0, 16, 32, 255]);
            }
            _ => panic!("expected gray"),
        }
    }

    #[test]
    fn pnm_errors() {
        assert!(decode_pnm(b"P3\n1 1\n255\n0 0 0", "t").is_err());
        let err = decode_pnm(b"P5\n4 4\n255\n\x00\x01", "t").unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00", "t").is_err());
    }

    #[test]
    fn maxval_rescaling() {
        match decode_pnm(b"P5 2 1 15\n\x00\x0f", "t").unwrap() {
            Pnm::Gray { data, .. } => assert_eq!(data, vec![0, 255]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn reflection_padding() {
        assert_eq!((0..7).map(|i| reflect(i, 4)).collect::<Vec<_>>(), vec![0, 1, 2, 3, 2, 1, 0]);
        let img = RgbImage::filled(5, 3, [9, 9, 9]);
        let p = img.pad_to_multiple(8);
        assert_eq!((p.width, p.height), (8, 8));
        assert!(p.data.iter().all(|&v| v == 9));
    }

    #[test]
    fn mask_binarizes_at_128() {
        let m = BinaryMap::from_gray_u8(3, 1, &[127, 128, 255]).unwrap();
        assert_eq!(m.data, vec![0, 1, 1]);
    }
}
