//! Dense tensors, the reverse-mode tape built on them, and the optimizer.
//!
//! Everything is row-major `f64`. Image-like tensors use the `[N, C, H, W]`
//! layout throughout the crate.

mod kernels;
pub mod ops;
pub mod optim;
pub mod tape;

pub use kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col};
pub use ops::{area_downsample, bilinear_resize, dilated_conv2d, max_pool2d, sigmoid, softmax_channels};
pub use optim::{clip_grad_norm, poly_lr, sgd_step, sgd_step_scaled, OptimizerState};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("dimensions must be positive, got {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Builds a tensor from a shape-checked closure over flat indices.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::shape(format!("expected rank-4 [N,C,H,W], got {other:?}"))),
        }
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Geometry of one (possibly dilated) 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Square kernel with padding picked so stride-1 output keeps the input size.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        if self.dilation == 0 {
            return Err(Error::InvalidArgument("conv dilation must be >= 1".into()));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel_h - 1) + 1,
            self.dilation * (self.kernel_w - 1) + 1,
        )
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (eh, ew) = self.effective_kernel();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < eh {
            return Err(Error::shape(format!(
                "input height {h} (padded {ph}) smaller than effective kernel height {eh}"
            )));
        }
        if pw < ew {
            return Err(Error::shape(format!(
                "input width {w} (padded {pw}) smaller than effective kernel width {ew}"
            )));
        }
        Ok(((ph - eh) / self.stride + 1, (pw - ew) / self.stride + 1))
    }

    /// The equivalent dilation-1 spec whose kernel has `dilation - 1` zeros
    /// inserted between taps.
    pub fn zero_upsampled(&self) -> Self {
        let (eh, ew) = self.effective_kernel();
        Self {
            kernel_h: eh,
            kernel_w: ew,
            dilation: 1,
            ..*self
        }
    }
}

/// Expands a `[O, C, kh, kw]` kernel by inserting `dilation - 1` zeros between taps.
pub fn zero_upsample_kernel(weights: &Tensor, dilation: usize) -> Result<Tensor> {
    let (o, c, kh, kw) = weights.nchw()?;
    let eh = dilation * (kh - 1) + 1;
    let ew = dilation * (kw - 1) + 1;
    let mut out = vec![0.0; o * c * eh * ew];
    for oc in 0..o {
        for ic in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    out[((oc * c + ic) * eh + i * dilation) * ew + j * dilation] =
                        weights.data[((oc * c + ic) * kh + i) * kw + j];
                }
            }
        }
    }
    Tensor::new(vec![o, c, eh, ew], out)
}
