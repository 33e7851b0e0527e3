//! Reverse-mode differentiation over a flat, append-only tape.
//!
//! Every operation appends a node holding its forward value plus whatever the
//! backward pass needs. [`Tape::backward`] walks the nodes in reverse and
//! leaves gradients in the `grad` field of every node whose tensor has
//! `requires_grad` set.

use super::ops::{
    self, bilinear_resize_backward, conv2d_backward, conv2d_forward, max_pool_forward,
    softmax_channels_backward,
};
use super::{ConvSpec, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
        cols: Vec<f64>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    SoftmaxChannels {
        input: Var,
    },
    Resize {
        input: Var,
    },
    Stack {
        inputs: Vec<Var>,
    },
    SelectChannel {
        input: Var,
        channel: usize,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Flatten {
        input: Var,
    },
    BalancedBce {
        pred: Var,
        // d loss / d pred, filled at forward time
        local_grad: Vec<f64>,
    },
    SquaredError {
        pred: Var,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf; its `requires_grad` flag decides whether a
    /// gradient is kept for it after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: &ConvSpec) -> Result<Var> {
        let (out, cols) = conv2d_forward(self.value(input), spec, self.value(weight), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec: *spec,
                cols,
            },
        ))
    }

    pub fn max_pool(&mut self, input: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let (out, argmax) = max_pool_forward(self.value(input), window, stride, padding)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = ops::sigmoid(self.value(input));
        self.push(out, Op::Sigmoid { input })
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax_channels(self.value(input))?;
        Ok(self.push(out, Op::SoftmaxChannels { input }))
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(input), out_h, out_w)?;
        Ok(self.push(out, Op::Resize { input }))
    }

    pub fn stack_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::stack_channels(&values)?;
        Ok(self.push(out, Op::Stack { inputs: inputs.to_vec() }))
    }

    pub fn select_channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.nchw()?;
        if channel >= c {
            return Err(Error::shape(format!("channel {channel} out of range for {c} channels")));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * plane);
        for b in 0..n {
            let start = (b * c + channel) * plane;
            out.extend_from_slice(&x.data()[start..start + plane]);
        }
        let out = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(self.push(out, Op::SelectChannel { input, channel }))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::shape(format!(
                "{what}: operand dims {:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        Ok(())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "elementwise_mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).dims().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "elementwise_add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).dims().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Collapses every dimension after the first: `[N, ...] -> [N, D]`.
    pub fn flatten(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = x.dims()[0];
        let d = x.len() / n;
        let out = Tensor::new(vec![n, d], x.data().to_vec()).expect("same length");
        self.push(out, Op::Flatten { input })
    }

    /// Fully connected layer: `x[N, D] · W[D, H] + b[H]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (n, d) = match x.dims() {
            &[n, d] => (n, d),
            other => return Err(Error::shape(format!("linear input must be [N, D], got {other:?}"))),
        };
        let h = match w.dims() {
            &[wd, h] if wd == d => h,
            other => {
                return Err(Error::shape(format!(
                    "linear weight dims {other:?} do not match input feature size {d}"
                )))
            }
        };
        if b.dims() != [h] {
            return Err(Error::shape(format!("linear bias dims {:?}, expected [{h}]", b.dims())));
        }
        let mut out = vec![0.0; n * h];
        super::gemm_nn(n, h, d, x.data(), w.data(), &mut out);
        for row in out.chunks_exact_mut(h) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let out = Tensor::new(vec![n, h], out)?;
        Ok(self.push(out, Op::Linear { input, weight, bias }))
    }

    /// Class-balanced binary cross-entropy summed over pixels, with the
    /// balancing weight `β = |negatives| / |pixels|` computed per image.
    /// `pred` is `[N, ...]`; `gt` has the same length and holds 0/1 values.
    pub fn balanced_bce(&mut self, pred: Var, gt: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != gt.len() {
            return Err(Error::shape(format!(
                "balanced_bce: prediction has {} values, ground truth {}",
                p.len(),
                gt.len()
            )));
        }
        let n = p.dims()[0];
        let per_image = p.len() / n;
        let mut loss = 0.0;
        let mut local_grad = vec![0.0; p.len()];
        for b in 0..n {
            let range = b * per_image..(b + 1) * per_image;
            let g = &gt[range.clone()];
            let beta = class_balance_weight(g);
            for (i, (&pv, &gv)) in p.data()[range.clone()].iter().zip(g).enumerate() {
                let clamped = pv.clamp(PROB_EPS, 1.0 - PROB_EPS);
                let inside = pv > PROB_EPS && pv < 1.0 - PROB_EPS;
                let idx = range.start + i;
                if gv >= 0.5 {
                    loss -= beta * clamped.ln();
                    if inside {
                        local_grad[idx] = -beta / clamped;
                    }
                } else {
                    loss -= (1.0 - beta) * (1.0 - clamped).ln();
                    if inside {
                        local_grad[idx] = (1.0 - beta) / (1.0 - clamped);
                    }
                }
            }
        }
        Ok(self.push(Tensor::scalar(loss), Op::BalancedBce { pred, local_grad }))
    }

    /// `Σ (pred − label)²` over all elements of `pred`.
    pub fn squared_error(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != labels.len() {
            return Err(Error::shape(format!(
                "squared_error: {} predictions vs {} labels",
                p.len(),
                labels.len()
            )));
        }
        let loss = p.data().iter().zip(labels).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SquaredError {
                pred,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Back-propagates from a scalar node. Gradients land on every node whose
    /// tensor has `requires_grad == true`; intermediate gradients are dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    spec,
                    cols,
                } => {
                    let in_dims = self.nodes[input.0].value.dims().to_vec();
                    let out_hw = (node.value.dims()[2], node.value.dims()[3]);
                    let (gin, gw, gb) =
                        conv2d_backward(&in_dims, cols, spec, &self.nodes[weight.0].value, &g, out_hw);
                    accumulate(&mut grads, *input, gin);
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::MaxPool { input, argmax } => {
                    let mut gin = vec![0.0; self.nodes[input.0].value.len()];
                    for (&src, gv) in argmax.iter().zip(&g) {
                        gin[src] += gv;
                    }
                    accumulate(&mut grads, *input, gin);
                }
                Op::Relu { input } => {
                    let x = self.nodes[input.0].value.data();
                    let gin = x.iter().zip(&g).map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                    accumulate(&mut grads, *input, gin);
                }
                Op::Sigmoid { input } => {
                    let y = node.value.data();
                    let gin = y.iter().zip(&g).map(|(&yv, &gv)| gv * yv * (1.0 - yv)).collect();
                    accumulate(&mut grads, *input, gin);
                }
                Op::SoftmaxChannels { input } => {
                    let gin = softmax_channels_backward(&node.value, &g);
                    accumulate(&mut grads, *input, gin);
                }
                Op::Resize { input } => {
                    let in_dims = self.nodes[input.0].value.dims().to_vec();
                    let (oh, ow) = (node.value.dims()[2], node.value.dims()[3]);
                    let gin = bilinear_resize_backward(&in_dims, oh, ow, &g);
                    accumulate(&mut grads, *input, gin);
                }
                Op::Stack { inputs } => {
                    let (n, _, h, w) = node.value.nchw()?;
                    let plane = h * w;
                    let total_c = node.value.dims()[1];
                    let mut offset = 0;
                    for &inp in inputs {
                        let c = self.nodes[inp.0].value.dims()[1];
                        let mut gin = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            gin.extend_from_slice(&g[start..start + c * plane]);
                        }
                        offset += c;
                        accumulate(&mut grads, inp, gin);
                    }
                }
                Op::SelectChannel { input, channel } => {
                    let (n, c, h, w) = self.nodes[input.0].value.nchw()?;
                    let plane = h * w;
                    let mut gin = vec![0.0; n * c * plane];
                    for b in 0..n {
                        let start = (b * c + channel) * plane;
                        gin[start..start + plane].copy_from_slice(&g[b * plane..(b + 1) * plane]);
                    }
                    accumulate(&mut grads, *input, gin);
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let ga = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Flatten { input } => {
                    accumulate(&mut grads, *input, g);
                }
                Op::Linear { input, weight, bias } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weight.0].value;
                    let (n, d) = (x.dims()[0], x.dims()[1]);
                    let h = w.dims()[1];
                    let mut gx = vec![0.0; n * d];
                    super::gemm_nt(n, d, h, &g, w.data(), &mut gx);
                    let mut gw = vec![0.0; d * h];
                    super::gemm_tn(d, h, n, x.data(), &g, &mut gw);
                    let mut gb = vec![0.0; h];
                    for row in g.chunks_exact(h) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::BalancedBce { pred, local_grad } => {
                    let scale = g[0];
                    let gin = local_grad.iter().map(|v| v * scale).collect();
                    accumulate(&mut grads, *pred, gin);
                }
                Op::SquaredError { pred, labels } => {
                    let scale = g[0];
                    let p = self.nodes[pred.0].value.data();
                    let gin = p.iter().zip(labels).map(|(a, b)| 2.0 * (a - b) * scale).collect();
                    accumulate(&mut grads, *pred, gin);
                }
            }
            if self.nodes[idx].value.requires_grad {
                let g = match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                };
                self.nodes[idx].value.grad = Some(g);
            }
        }
        Ok(())
    }
}

/// `β = |negatives| / |pixels|`, clamped away from 0 and 1.
pub fn class_balance_weight(gt: &[f64]) -> f64 {
    let negatives = gt.iter().filter(|&&v| v < 0.5).count();
    (negatives as f64 / gt.len() as f64).clamp(1e-6, 1.0 - 1e-6)
}
