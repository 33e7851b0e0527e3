//! Forward and backward kernels for the differentiable operations.
//!
//! The tape in [`super::tape`] records which of these ran; the functions here
//! are also usable directly when no gradient is needed.

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col};
use super::{ConvSpec, Tensor};
use crate::error::{Error, Result};

fn check_conv_shapes(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: &Tensor) -> Result<()> {
    spec.validate()?;
    let (_, c, _, _) = input.nchw()?;
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "conv input has {c} channels, spec expects in_channels={}",
            spec.in_channels
        )));
    }
    let expected = spec.weight_dims();
    if weights.dims() != expected {
        return Err(Error::shape(format!(
            "conv weights have dims {:?}, spec expects [out_channels, in_channels, kernel_h, kernel_w] = {expected:?}",
            weights.dims()
        )));
    }
    if bias.dims() != [spec.out_channels] {
        return Err(Error::shape(format!(
            "conv bias has dims {:?}, spec expects [out_channels] = [{}]",
            bias.dims(),
            spec.out_channels
        )));
    }
    Ok(())
}

/// Dilated 2-D convolution with explicit zero padding.
///
/// Output `y[o, p, q] = b[o] + Σ_{c,i,j} w[o,c,i,j] · x[c, p·s − pad + r·i, q·s − pad + r·j]`
/// where `r` is the dilation rate and `s` the stride.
pub fn dilated_conv2d(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    conv2d_forward(input, spec, weights, bias).map(|(out, _)| out)
}

/// Forward convolution that also returns the per-image column buffers.
pub(crate) fn conv2d_forward(
    input: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    check_conv_shapes(input, spec, weights, bias)?;
    let (n, c, h, w) = input.nchw()?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let k = c * spec.kernel_h * spec.kernel_w;
    let pix = oh * ow;
    let o = spec.out_channels;
    let mut cols = vec![0.0; n * k * pix];
    let mut out = vec![0.0; n * o * pix];
    for b in 0..n {
        let x = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let col = &mut cols[b * k * pix..(b + 1) * k * pix];
        im2col(x, h, w, spec, oh, ow, col);
        let y = &mut out[b * o * pix..(b + 1) * o * pix];
        gemm_nn(o, pix, k, weights.data(), col, y);
        for (oc, row) in y.chunks_exact_mut(pix).enumerate() {
            let bv = bias.data()[oc];
            for v in row {
                *v += bv;
            }
        }
    }
    Ok((Tensor::new(vec![n, o, oh, ow], out)?, cols))
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub(crate) fn conv2d_backward(
    input_dims: &[usize],
    cols: &[f64],
    spec: &ConvSpec,
    weights: &Tensor,
    grad_out: &[f64],
    out_hw: (usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = (input_dims[0], input_dims[1], input_dims[2], input_dims[3]);
    let (oh, ow) = out_hw;
    let k = c * spec.kernel_h * spec.kernel_w;
    let pix = oh * ow;
    let o = spec.out_channels;
    let mut gin = vec![0.0; n * c * h * w];
    let mut gw = vec![0.0; o * k];
    let mut gb = vec![0.0; o];
    let mut gcols = vec![0.0; k * pix];
    for b in 0..n {
        let gy = &grad_out[b * o * pix..(b + 1) * o * pix];
        let col = &cols[b * k * pix..(b + 1) * k * pix];
        for (oc, row) in gy.chunks_exact(pix).enumerate() {
            gb[oc] += row.iter().sum::<f64>();
        }
        gemm_nt(o, k, pix, gy, col, &mut gw);
        gcols.fill(0.0);
        gemm_tn(k, pix, o, weights.data(), gy, &mut gcols);
        col2im(&gcols, h, w, spec, oh, ow, &mut gin[b * c * h * w..(b + 1) * c * h * w]);
    }
    (gin, gw, gb)
}

/// Max pooling; padded positions never win. Returns the pooled tensor and,
/// per output element, the flat input index of the first row-major maximum.
pub(crate) fn max_pool_forward(
    input: &Tensor,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<usize>)> {
    if window == 0 {
        return Err(Error::InvalidArgument("pool window must be >= 1".into()));
    }
    if !(1..=2).contains(&stride) {
        return Err(Error::InvalidArgument(format!("pool stride must be 1 or 2, got {stride}")));
    }
    if padding >= window {
        return Err(Error::InvalidArgument(format!(
            "pool padding {padding} must be smaller than window {window}"
        )));
    }
    let (n, c, h, w) = input.nchw()?;
    if h + 2 * padding < window || w + 2 * padding < window {
        return Err(Error::shape(format!(
            "pool window {window} larger than input {h}x{w} (padding {padding})"
        )));
    }
    let oh = (h + 2 * padding - window) / stride + 1;
    let ow = (w + 2 * padding - window) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for i in 0..window {
                    let y = (oy * stride + i) as isize - padding as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..window {
                        let x = (ox * stride + j) as isize - padding as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let idx = base + y as usize * w + x as usize;
                        if best_idx == usize::MAX || data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

/// Per-window maximum over an `[N, C, H, W]` tensor (no padding).
pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    max_pool_forward(input, window, stride, 0).map(|(t, _)| t)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&x| sigmoid_scalar(x)).collect();
    Tensor::new(input.dims().to_vec(), data).expect("same shape")
}

pub(crate) fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&x| x.max(0.0)).collect();
    Tensor::new(input.dims().to_vec(), data).expect("same shape")
}

/// Softmax across the channel axis at every spatial location.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.nchw()?;
    let plane = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(x[base + ch * plane + p]);
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (x[base + ch * plane + p] - max).exp();
                out[base + ch * plane + p] = e;
                sum += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] /= sum;
            }
        }
    }
    Tensor::new(input.dims().to_vec(), out)
}

pub(crate) fn softmax_channels_backward(out: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = out.nchw().expect("rank 4");
    let plane = h * w;
    let y = out.data();
    let mut gin = vec![0.0; y.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut inner = 0.0;
            for ch in 0..c {
                let i = base + ch * plane + p;
                inner += grad_out[i] * y[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                gin[i] = y[i] * (grad_out[i] - inner);
            }
        }
    }
    gin
}

/// Source index pair and interpolation weight along one axis, using
/// half-pixel centres.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn axis_taps(input: usize, output: usize) -> Vec<AxisTap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            AxisTap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Bilinear interpolation of every `[H, W]` plane to `out_h × out_w`.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.nchw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!("resize target {out_h}x{out_w} must be positive")));
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for ay in &ty {
            let r0 = &src[ay.lo * w..(ay.lo + 1) * w];
            let r1 = &src[ay.hi * w..(ay.hi + 1) * w];
            for ax in &tx {
                let top = (1.0 - ax.frac) * r0[ax.lo] + ax.frac * r0[ax.hi];
                let bot = (1.0 - ax.frac) * r1[ax.lo] + ax.frac * r1[ax.hi];
                out.push((1.0 - ay.frac) * top + ay.frac * bot);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub(crate) fn bilinear_resize_backward(input_dims: &[usize], out_h: usize, out_w: usize, grad_out: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (input_dims[0], input_dims[1], input_dims[2], input_dims[3]);
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut gin = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let g = &grad_out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let dst = &mut gin[plane * h * w..(plane + 1) * h * w];
        for (oy, ay) in ty.iter().enumerate() {
            for (ox, ax) in tx.iter().enumerate() {
                let gv = g[oy * out_w + ox];
                let top = (1.0 - ay.frac) * gv;
                let bot = ay.frac * gv;
                dst[ay.lo * w + ax.lo] += (1.0 - ax.frac) * top;
                dst[ay.lo * w + ax.hi] += ax.frac * top;
                dst[ay.hi * w + ax.lo] += (1.0 - ax.frac) * bot;
                dst[ay.hi * w + ax.hi] += ax.frac * bot;
            }
        }
    }
    gin
}

/// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
pub fn stack_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("stack_channels needs at least one input".into()))?;
    let (n, _, h, w) = first.nchw()?;
    let mut total_c = 0;
    for (i, t) in inputs.iter().enumerate() {
        let (tn, tc, th, tw) = t.nchw()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(format!(
                "stack_channels input {i} has dims {:?}, expected [{n}, _, {h}, {w}]",
                t.dims()
            )));
        }
        total_c += tc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for t in inputs {
            let tc = t.dims()[1];
            out.extend_from_slice(&t.data()[b * tc * plane..(b + 1) * tc * plane]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], out)
}

/// Area-average downsampling of `[N, C, H, W]` planes by an integer factor.
/// Trailing rows/columns that do not fill a whole block are averaged over the
/// pixels they do have.
pub fn area_downsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.nchw()?;
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    let oh = h.div_ceil(factor);
    let ow = w.div_ceil(factor);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut counts = vec![0usize; oh * ow];
    for y in 0..h {
        for x in 0..w {
            counts[(y / factor) * ow + x / factor] += 1;
        }
    }
    for plane in 0..n * c {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                dst[(y / factor) * ow + x / factor] += src[y * w + x];
            }
        }
        for (d, &cnt) in dst.iter_mut().zip(&counts) {
            *d /= cnt as f64;
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Mirrors `[N, C, H, W]` planes left to right.
pub fn flip_horizontal(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.nchw()?;
    let mut out = input.data().to_vec();
    for row in out.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::new(vec![n, c, h, w], out)
}
