//! Multi-scale fully convolutional stream.
//!
//! A VGG-style backbone whose last two pools keep stride 1 (total stride 8),
//! dilated convolutions after them, and four side branches hanging off the
//! first four pools. The four side outputs and the backbone score map are
//! stacked into five channels and fused by a 1×1 convolution followed by a
//! sigmoid, giving a saliency map at 1/8 resolution that is bilinearly
//! upsampled to the input size.
//!
//! The same network, retrained on boundary labels from
//! [`prepare_contour_gt`], serves as the salient-contour detector.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{BinaryMap, GrayMap, MapSource, RgbImage, SaliencyMap};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// Total downsampling between the input and the fused score map.
pub const OUTPUT_STRIDE: usize = 8;

/// Scales used for multi-scale input inference.
pub const INPUT_SCALES: [f64; 3] = [1.0, 0.75, 0.5];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub convs: usize,
    pub channels: usize,
    pub pool_stride: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    /// 1-based index of the pool this branch reads from.
    pub attach_stage: usize,
    pub first_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    pub branches: Vec<BranchSpec>,
    pub branch_channels: usize,
    /// Width of the two converted fully connected layers.
    pub head_channels: usize,
    pub head_kernel: usize,
    pub head_dilation: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        let stage = |convs, channels, pool_stride, dilation| StageSpec {
            convs,
            channels,
            pool_stride,
            dilation,
        };
        Self {
            in_channels: 3,
            stages: vec![
                stage(2, 8, 2, 1),
                stage(2, 16, 2, 1),
                stage(3, 32, 2, 1),
                stage(3, 64, 1, 1),
                stage(3, 64, 1, 2),
            ],
            branches: [4, 2, 1, 1]
                .iter()
                .enumerate()
                .map(|(i, &s)| BranchSpec {
                    attach_stage: i + 1,
                    first_stride: s,
                })
                .collect(),
            branch_channels: 16,
            head_channels: 128,
            head_kernel: 1,
            head_dilation: 4,
        }
    }
}

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    pub tensors: IndexMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("weight store has no tensor named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("weight store has no tensor named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Sub-store of the tensors whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> WeightStore {
        WeightStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every tensor of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: &WeightStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }
}

/// Layer of the network: a name prefix and its convolution geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 5 {
            return Err(Error::InvalidSpec(format!(
                "need exactly 5 backbone stages, got {}",
                self.stages.len()
            )));
        }
        let strides: Vec<usize> = self.stages.iter().map(|s| s.pool_stride).collect();
        if strides != [2, 2, 2, 1, 1] {
            return Err(Error::InvalidSpec(format!(
                "pool strides must be (2,2,2,1,1) for a total stride of 8, got {strides:?}"
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.convs == 0 || s.channels == 0 {
                return Err(Error::InvalidSpec(format!("stage {} has no convolutions or channels", i + 1)));
            }
            let expected = if i > 0 && self.stages[i - 1].pool_stride == 1 { 2 } else { 1 };
            if s.dilation != expected {
                return Err(Error::InvalidSpec(format!(
                    "stage {} must use dilation {expected} (previous pool stride {}), got {}",
                    i + 1,
                    if i > 0 { self.stages[i - 1].pool_stride } else { 0 },
                    s.dilation
                )));
            }
        }
        if self.branches.len() != 4 {
            return Err(Error::InvalidSpec(format!(
                "need exactly 4 side branches, got {}",
                self.branches.len()
            )));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if b.attach_stage != i + 1 {
                return Err(Error::InvalidSpec(format!(
                    "side branch {} must attach after stage {}, got stage {}",
                    i + 1,
                    i + 1,
                    b.attach_stage
                )));
            }
            let expected = [4, 2, 1, 1][i];
            if b.first_stride != expected {
                return Err(Error::InvalidSpec(format!(
                    "side branch {} first-layer stride must be {expected}, got {}",
                    i + 1,
                    b.first_stride
                )));
            }
        }
        if self.head_dilation != 4 {
            return Err(Error::InvalidSpec(format!(
                "converted head layers must use dilation 4, got {}",
                self.head_dilation
            )));
        }
        if self.branch_channels == 0 || self.head_channels == 0 || self.head_kernel == 0 || self.in_channels == 0 {
            return Err(Error::InvalidSpec("channel widths and head kernel must be positive".into()));
        }
        if self.head_kernel.is_multiple_of(2) {
            return Err(Error::InvalidSpec("head kernel must be odd".into()));
        }
        Ok(())
    }

    /// Channels of the feature-masking layer (last convolution of stage 5).
    pub fn feature_channels(&self) -> usize {
        self.stages[4].channels
    }

    pub fn backbone_layers(&self) -> Vec<Vec<ConvLayer>> {
        let mut c_in = self.in_channels;
        self.stages
            .iter()
            .enumerate()
            .map(|(si, s)| {
                (0..s.convs)
                    .map(|ci| {
                        let layer = ConvLayer {
                            name: format!("stage{}.conv{}", si + 1, ci + 1),
                            spec: ConvSpec::same(c_in, s.channels, 3, 1, s.dilation),
                        };
                        c_in = s.channels;
                        layer
                    })
                    .collect()
            })
            .collect()
    }

    pub fn head_layers(&self) -> Vec<ConvLayer> {
        let c = self.stages[4].channels;
        let h = self.head_channels;
        vec![
            ConvLayer {
                name: "fc6".into(),
                spec: ConvSpec::same(c, h, self.head_kernel, 1, self.head_dilation),
            },
            ConvLayer {
                name: "fc7".into(),
                spec: ConvSpec::same(h, h, 1, 1, self.head_dilation),
            },
            ConvLayer {
                name: "score".into(),
                spec: ConvSpec::same(h, 1, 1, 1, 1),
            },
        ]
    }

    pub fn branch_layers(&self, branch: usize) -> Vec<ConvLayer> {
        let b = &self.branches[branch];
        let c_in = self.stages[b.attach_stage - 1].channels;
        let bc = self.branch_channels;
        let k = branch + 1;
        vec![
            ConvLayer {
                name: format!("branch{k}.conv1"),
                spec: ConvSpec::same(c_in, bc, 3, b.first_stride, 1),
            },
            ConvLayer {
                name: format!("branch{k}.conv2"),
                spec: ConvSpec::same(bc, bc, 1, 1, 1),
            },
            ConvLayer {
                name: format!("branch{k}.conv3"),
                spec: ConvSpec::same(bc, 1, 1, 1, 1),
            },
        ]
    }

    pub fn fuse_layer(&self) -> ConvLayer {
        ConvLayer {
            name: "fuse".into(),
            spec: ConvSpec::same(1 + self.branches.len(), 1, 1, 1, 1),
        }
    }

    /// Every convolution in parameter order.
    pub fn all_layers(&self) -> Vec<ConvLayer> {
        let mut layers: Vec<ConvLayer> = self.backbone_layers().into_iter().flatten().collect();
        layers.extend(self.head_layers());
        for b in 0..self.branches.len() {
            layers.extend(self.branch_layers(b));
        }
        layers.push(self.fuse_layer());
        layers
    }
}

/// He-uniform weights and zero biases for a list of convolutions.
pub(crate) fn init_conv_layers(store: &mut WeightStore, layers: &[ConvLayer], rng: &mut ChaCha8Rng) -> Result<()> {
    for layer in layers {
        let s = &layer.spec;
        let fan_in = (s.in_channels * s.kernel_h * s.kernel_w) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let dims = s.weight_dims();
        let w = Tensor::from_fn(&dims, |_| rng.gen_range(-bound..bound));
        store.insert(format!("{}.weight", layer.name), w)?;
        store.insert(format!("{}.bias", layer.name), Tensor::zeros(&[s.out_channels]))?;
    }
    Ok(())
}

/// Allocates and initializes every parameter of the network.
pub fn build_msfcn(spec: &NetworkSpec, seed: u64) -> Result<WeightStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    init_conv_layers(&mut store, &spec.all_layers(), &mut rng)?;
    Ok(store)
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct MsfcnVars {
    /// Saliency at 1/8 resolution, after the sigmoid.
    pub s1_low: Var,
    /// Output of the feature-masking layer, at 1/8 resolution.
    pub feature: Var,
    /// The five single-channel maps before stacking.
    pub stacked_inputs: Vec<Var>,
    /// Parameter name to leaf handle, for gradient collection.
    pub params: IndexMap<String, Var>,
}

pub(crate) fn conv_layer(
    tape: &mut Tape,
    weights: &WeightStore,
    params: &mut IndexMap<String, Var>,
    layer: &ConvLayer,
    input: Var,
    trainable: bool,
) -> Result<Var> {
    let mut leaf = |suffix: &str, tape: &mut Tape| -> Result<Var> {
        let name = format!("{}.{suffix}", layer.name);
        let t = weights.get(&name)?.clone();
        let v = if trainable { tape.param(t) } else { tape.constant(t) };
        params.insert(name, v);
        Ok(v)
    };
    let w = leaf("weight", tape)?;
    let b = leaf("bias", tape)?;
    tape.conv2d(input, w, b, &layer.spec)
}

/// Records the network on `tape`. Input must be `[1, C, H, W]` with `H` and
/// `W` divisible by 8.
pub fn record_msfcn(
    tape: &mut Tape,
    weights: &WeightStore,
    spec: &NetworkSpec,
    input: Var,
    trainable: bool,
) -> Result<MsfcnVars> {
    let (_, c, h, w) = tape.value(input).nchw()?;
    if c != spec.in_channels {
        return Err(Error::shape(format!("network expects {} input channels, got {c}", spec.in_channels)));
    }
    if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
        return Err(Error::shape(format!(
            "input {h}x{w} is not divisible by {OUTPUT_STRIDE}; pad it first"
        )));
    }
    let mut params = IndexMap::new();
    let mut x = input;
    let mut pooled = Vec::with_capacity(5);
    let mut feature = None;
    for (si, layers) in spec.backbone_layers().iter().enumerate() {
        for layer in layers {
            x = conv_layer(tape, weights, &mut params, layer, x, trainable)?;
            x = tape.relu(x);
        }
        if si == 4 {
            feature = Some(x);
        }
        x = match spec.stages[si].pool_stride {
            2 => tape.max_pool(x, 2, 2, 0)?,
            _ => tape.max_pool(x, 3, 1, 1)?,
        };
        pooled.push(x);
    }
    let heads = spec.head_layers();
    for layer in &heads[..2] {
        x = conv_layer(tape, weights, &mut params, layer, x, trainable)?;
        x = tape.relu(x);
    }
    let backbone_score = conv_layer(tape, weights, &mut params, &heads[2], x, trainable)?;

    let mut side = Vec::with_capacity(spec.branches.len());
    for (bi, b) in spec.branches.iter().enumerate() {
        let layers = spec.branch_layers(bi);
        let mut y = pooled[b.attach_stage - 1];
        y = conv_layer(tape, weights, &mut params, &layers[0], y, trainable)?;
        y = tape.relu(y);
        y = conv_layer(tape, weights, &mut params, &layers[1], y, trainable)?;
        y = tape.relu(y);
        y = conv_layer(tape, weights, &mut params, &layers[2], y, trainable)?;
        side.push(y);
    }
    side.push(backbone_score);
    let target = tape.value(backbone_score).dims().to_vec();
    for (i, &v) in side.iter().enumerate() {
        if tape.value(v).dims() != target.as_slice() {
            return Err(Error::shape(format!(
                "stacked map {i} has dims {:?}, backbone score has {target:?}",
                tape.value(v).dims()
            )));
        }
    }
    let stacked = tape.stack_channels(&side)?;
    let fused = conv_layer(tape, weights, &mut params, &spec.fuse_layer(), stacked, trainable)?;
    let s1_low = tape.sigmoid(fused);
    Ok(MsfcnVars {
        s1_low,
        feature: feature.expect("five stages"),
        stacked_inputs: side,
        params,
    })
}

/// Output of a plain forward pass.
#[derive(Clone, Debug)]
pub struct MsfcnOutput {
    /// Saliency at the (padded) input resolution.
    pub s1: SaliencyMap,
    /// 1/8-resolution saliency before upsampling.
    pub s1_low: Tensor,
    /// Feature-masking layer activations, `[1, C, H/8, W/8]`.
    pub feature: Tensor,
}

/// Runs the network on a `[1, 3, H, W]` tensor (H, W divisible by 8).
pub fn forward_msfcn(weights: &WeightStore, spec: &NetworkSpec, image: &Tensor) -> Result<MsfcnOutput> {
    let (_, _, h, w) = image.nchw()?;
    let mut tape = Tape::new();
    let input = tape.constant(image.clone());
    let vars = record_msfcn(&mut tape, weights, spec, input, false)?;
    let up = tape.bilinear_resize(vars.s1_low, h, w)?;
    let s1 = GrayMap::from_tensor(tape.value(up))?;
    Ok(MsfcnOutput {
        s1: SaliencyMap::new(s1, MapSource::FullyConvolutional),
        s1_low: tape.take_value(vars.s1_low),
        feature: tape.take_value(vars.feature),
    })
}

/// Forward pass on an arbitrary-size image: reflection-pads to a multiple of
/// 8, runs the network, and crops the upsampled map back.
pub fn forward_image(weights: &WeightStore, spec: &NetworkSpec, image: &RgbImage) -> Result<MsfcnOutput> {
    let padded = image.pad_to_multiple(OUTPUT_STRIDE);
    let mut out = forward_msfcn(weights, spec, &padded.to_input_tensor())?;
    if (padded.width, padded.height) != (image.width, image.height) {
        out.s1.map = out.s1.map.crop(image.width, image.height);
    }
    Ok(out)
}

/// Runs the stream at the input scales 1, 0.75 and 0.5, resizes each map
/// back to the original size and keeps the per-pixel maximum.
pub fn multiscale_infer(weights: &WeightStore, spec: &NetworkSpec, image: &RgbImage) -> Result<SaliencyMap> {
    let maps = per_scale_maps(weights, spec, image)?;
    Ok(SaliencyMap::new(max_over_maps(&maps)?, MapSource::FullyConvolutional))
}

/// The per-scale S1 maps, each resized to the original image size.
pub fn per_scale_maps(weights: &WeightStore, spec: &NetworkSpec, image: &RgbImage) -> Result<Vec<GrayMap>> {
    INPUT_SCALES
        .iter()
        .map(|&s| {
            let w = ((image.width as f64 * s).round() as usize).max(1);
            let h = ((image.height as f64 * s).round() as usize).max(1);
            let scaled = image.resize(w, h)?;
            let out = forward_image(weights, spec, &scaled)?;
            out.s1.map.resize(image.width, image.height)
        })
        .collect()
}

pub fn max_over_maps(maps: &[GrayMap]) -> Result<GrayMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no maps to combine".into()))?;
    let mut out = first.clone();
    for m in &maps[1..] {
        if (m.width, m.height) != (out.width, out.height) {
            return Err(Error::shape("per-scale maps differ in size"));
        }
        for (o, v) in out.data.iter_mut().zip(&m.data) {
            *o = o.max(*v);
        }
    }
    Ok(out)
}

/// Marks salient pixels that touch the background through a 4-neighbour or
/// lie on the image border.
pub fn prepare_contour_gt(gt: &BinaryMap) -> BinaryMap {
    let (w, h) = (gt.width, gt.height);
    let mut out = BinaryMap::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            if !gt.get(x, y) {
                continue;
            }
            let boundary = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !gt.get(x - 1, y)
                || !gt.get(x + 1, y)
                || !gt.get(x, y - 1)
                || !gt.get(x, y + 1);
            if boundary {
                out.data[y * w + x] = 1;
            }
        }
    }
    out
}
