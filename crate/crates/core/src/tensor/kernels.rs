//! Row-major matrix products and the im2col lowering used by convolution.
//!
//! Each output element of [`gemm_nn`] accumulates its `k` products strictly in
//! index order. Inserting exact zeros into the reduction therefore leaves the
//! result bit-identical, which is what makes a dilated convolution equal to a
//! dense convolution with a zero-upsampled kernel.

use super::ConvSpec;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_nn(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aki * bv;
            }
        }
    }
}

/// Four-lane dot product with a fixed reduction order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Lowers one `[C, H, W]` image into a `[C·kh·kw, OH·OW]` column matrix.
pub fn im2col(input: &[f64], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, cols: &mut [f64]) {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let n = oh * ow;
    debug_assert_eq!(cols.len(), spec.in_channels * kh * kw * n);
    let pad = spec.padding as isize;
    for c in 0..spec.in_channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let dst = &mut cols[row * n..(row + 1) * n];
                let dy = (i * spec.dilation) as isize - pad;
                let dx = (j * spec.dilation) as isize - pad;
                for oy in 0..oh {
                    let y = (oy * spec.stride) as isize + dy;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * w..(y as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let x = (ox * spec.stride) as isize + dx;
                        *d = if x < 0 || x >= w as isize { 0.0 } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `[C, H, W]` image.
pub fn col2im(cols: &[f64], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, out: &mut [f64]) {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let n = oh * ow;
    let pad = spec.padding as isize;
    for c in 0..spec.in_channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let src = &cols[row * n..(row + 1) * n];
                let dy = (i * spec.dilation) as isize - pad;
                let dx = (j * spec.dilation) as isize - pad;
                for oy in 0..oh {
                    let y = (oy * spec.stride) as isize + dy;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * w..(y as usize + 1) * w];
                    for ox in 0..ow {
                        let x = (ox * spec.stride) as isize + dx;
                        if x >= 0 && x < w as isize {
                            dst[x as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, n, k) = (3, 5, 7);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expected = naive(m, n, k, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, n, k, &a, &b, &mut c);
        assert_eq!(c, expected);

        let bt = transpose(k, n, &b);
        let mut c = vec![0.0; m * n];
        gemm_nt(m, n, k, &a, &bt, &mut c);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(m, k, &a);
        let mut c = vec![0.0; m * n];
        gemm_tn(m, n, k, &at, &b, &mut c);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 2,
            stride: 2,
            dilation: 2,
            padding: 1,
        };
        let (h, w) = (7, 6);
        let (oh, ow) = spec.output_hw(h, w).unwrap();
        let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.13).sin()).collect();
        let rows = 2 * 3 * 2;
        let y: Vec<f64> = (0..rows * oh * ow).map(|i| (i as f64 * 0.29).cos()).collect();
        let mut cols = vec![0.0; rows * oh * ow];
        im2col(&x, h, w, &spec, oh, ow, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, h, w, &spec, oh, ow, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
