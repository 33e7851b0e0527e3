//! Fusion of the two saliency streams.
//!
//! The attentional module reads the feature-masking layer and predicts two
//! weight maps that sum to one at every location. Fusion happens at 1/8
//! resolution; the result is bilinearly upsampled to the image size.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{GrayMap, MapSource, SaliencyMap};
use crate::msfcn::{conv_layer, init_conv_layers, ConvLayer, WeightStore, OUTPUT_STRIDE};
use crate::tensor::{area_downsample, bilinear_resize, ConvSpec, Tape, Tensor, Var};

pub const ATTENTION_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// Learned, content-dependent weight maps.
    #[default]
    Attention,
    /// `W1 = W2 = 0.5`.
    Average,
    /// Sigmoid of a learned 1×1 convolution over the two maps.
    Conv1x1,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Attention => "attention",
            FusionMode::Average => "average",
            FusionMode::Conv1x1 => "conv1x1",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(FusionMode::Attention),
            "average" => Ok(FusionMode::Average),
            "conv1x1" => Ok(FusionMode::Conv1x1),
            other => Err(Error::InvalidArgument(format!(
                "unknown fusion mode {other:?} (expected attention, average or conv1x1)"
            ))),
        }
    }
}

/// Per-location stream weights at 1/8 resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w1: GrayMap,
    pub w2: GrayMap,
}

impl AttentionWeights {
    pub fn uniform(width: usize, height: usize, w1: f64) -> Self {
        Self {
            w1: GrayMap::filled(width, height, w1),
            w2: GrayMap::filled(width, height, 1.0 - w1),
        }
    }

    fn from_softmax(t: &Tensor) -> Result<Self> {
        let (_, c, h, w) = t.nchw()?;
        if c != 2 {
            return Err(Error::shape(format!("attention output has {c} channels, expected 2")));
        }
        let plane = h * w;
        Ok(Self {
            w1: GrayMap::new(w, h, t.data()[..plane].to_vec())?,
            w2: GrayMap::new(w, h, t.data()[plane..2 * plane].to_vec())?,
        })
    }
}

pub fn attention_layers(feature_channels: usize, hidden: usize) -> Vec<ConvLayer> {
    vec![
        ConvLayer {
            name: "attention.conv1".into(),
            spec: ConvSpec::same(feature_channels, hidden, 3, 1, 1),
        },
        ConvLayer {
            name: "attention.conv2".into(),
            spec: ConvSpec::same(hidden, 2, 1, 1, 1),
        },
    ]
}

pub fn conv1x1_fusion_layer() -> ConvLayer {
    ConvLayer {
        name: "fusion.conv".into(),
        spec: ConvSpec::same(2, 1, 1, 1, 1),
    }
}

/// Parameters of the attentional module and of the 1×1-conv fusion variant.
pub fn build_fusion(feature_channels: usize, hidden: usize, seed: u64) -> Result<WeightStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    init_conv_layers(&mut store, &attention_layers(feature_channels, hidden), &mut rng)?;
    let fl = conv1x1_fusion_layer();
    store.insert(format!("{}.weight", fl.name), Tensor::full(&fl.spec.weight_dims(), 0.5))?;
    store.insert(format!("{}.bias", fl.name), Tensor::zeros(&[1]))?;
    Ok(store)
}

/// Records conv → ReLU → conv → softmax over the feature map; returns the
/// `[1, 2, h, w]` weight maps.
pub fn record_attention(
    tape: &mut Tape,
    weights: &WeightStore,
    feature: Var,
    params: &mut IndexMap<String, Var>,
    trainable: bool,
) -> Result<Var> {
    let c = tape.value(feature).nchw()?.1;
    let hidden = weights.get("attention.conv1.weight")?.dims()[0];
    let layers = attention_layers(c, hidden);
    let h = conv_layer(tape, weights, params, &layers[0], feature, trainable)?;
    let h = tape.relu(h);
    let logits = conv_layer(tape, weights, params, &layers[1], h, trainable)?;
    tape.softmax_channels(logits)
}

/// Records the fused map at 1/8 resolution. `s1_low` and `s2_low` are
/// `[1, 1, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn record_fusion(
    tape: &mut Tape,
    weights: &WeightStore,
    mode: FusionMode,
    feature: Var,
    s1_low: Var,
    s2_low: Var,
    params: &mut IndexMap<String, Var>,
    trainable: bool,
) -> Result<Var> {
    match mode {
        FusionMode::Attention => {
            let att = record_attention(tape, weights, feature, params, trainable)?;
            let w1 = tape.select_channel(att, 0)?;
            let w2 = tape.select_channel(att, 1)?;
            let a = tape.mul(w1, s1_low)?;
            let b = tape.mul(w2, s2_low)?;
            tape.add(a, b)
        }
        FusionMode::Average => {
            let dims = tape.value(s1_low).dims().to_vec();
            let half = tape.constant(Tensor::full(&dims, 0.5));
            let sum = tape.add(s1_low, s2_low)?;
            tape.mul(sum, half)
        }
        FusionMode::Conv1x1 => {
            let stacked = tape.stack_channels(&[s1_low, s2_low])?;
            let o = conv_layer(tape, weights, params, &conv1x1_fusion_layer(), stacked, trainable)?;
            Ok(tape.sigmoid(o))
        }
    }
}

/// Attention weight maps for one `[1, C, h, w]` feature map.
pub fn attention_forward(feature: &Tensor, weights: &WeightStore) -> Result<AttentionWeights> {
    let mut tape = Tape::new();
    let f = tape.constant(feature.clone());
    let mut params = IndexMap::new();
    let att = record_attention(&mut tape, weights, f, &mut params, false)?;
    AttentionWeights::from_softmax(tape.value(att))
}

/// Area-averages an image-resolution map down to the fused resolution.
pub fn downsample_to_low(map: &GrayMap) -> Result<GrayMap> {
    GrayMap::from_tensor(&area_downsample(&map.to_tensor(), OUTPUT_STRIDE)?)
}

/// `S = W1⊙S1 + W2⊙S2` at low resolution, upsampled to `out_w × out_h`.
pub fn fuse_saliency(
    s1_low: &GrayMap,
    s2_low: &GrayMap,
    weights: &AttentionWeights,
    out_w: usize,
    out_h: usize,
) -> Result<SaliencyMap> {
    let low = fuse_low(s1_low, s2_low, weights)?;
    let up = bilinear_resize(&low.to_tensor(), out_h, out_w)?;
    let mut map = GrayMap::from_tensor(&up)?;
    map.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(SaliencyMap::new(map, MapSource::Fused))
}

/// The fused map before upsampling.
pub fn fuse_low(s1_low: &GrayMap, s2_low: &GrayMap, weights: &AttentionWeights) -> Result<GrayMap> {
    let dims = (s1_low.width, s1_low.height);
    for (what, m) in [("S2", s2_low), ("W1", &weights.w1), ("W2", &weights.w2)] {
        if (m.width, m.height) != dims {
            return Err(Error::shape(format!(
                "{what} is {}x{}, S1 is {}x{}",
                m.width, m.height, dims.0, dims.1
            )));
        }
    }
    let data = s1_low
        .data
        .iter()
        .zip(&s2_low.data)
        .zip(weights.w1.data.iter().zip(&weights.w2.data))
        .map(|((a, b), (w1, w2))| w1 * a + w2 * b)
        .collect();
    GrayMap::new(dims.0, dims.1, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::from_fn(&[1, c, h, w], |i| ((i as f64 + seed as f64) * 0.731).sin())
    }

    #[test]
    fn zero_weights_give_even_split() {
        let mut store = build_fusion(4, 6, 3).unwrap();
        for t in store.tensors.values_mut() {
            t.data_mut().fill(0.0);
        }
        let a = attention_forward(&feature(4, 5, 3, 0), &store).unwrap();
        assert!(a.w1.data.iter().chain(&a.w2.data).all(|&v| v == 0.5));
    }

    #[test]
    fn weights_sum_to_one() {
        let store = build_fusion(4, 6, 9).unwrap();
        let a = attention_forward(&feature(4, 5, 3, 2), &store).unwrap();
        for (x, y) in a.w1.data.iter().zip(&a.w2.data) {
            assert!(*x >= 0.0 && *y >= 0.0);
            assert!((x + y - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_examples() {
        let s1 = GrayMap::filled(2, 2, 0.2);
        let s2 = GrayMap::filled(2, 2, 0.8);
        let w = AttentionWeights::uniform(2, 2, 0.25);
        let f = fuse_low(&s1, &s2, &w).unwrap();
        assert!(f.data.iter().all(|v| (v - 0.65).abs() < 1e-15));

        let w = AttentionWeights::uniform(2, 2, 1.0);
        assert_eq!(fuse_low(&s1, &s2, &w).unwrap(), s1);

        let w = AttentionWeights::uniform(2, 2, 0.37);
        let same = fuse_low(&s1, &s1, &w).unwrap();
        assert!(same.data.iter().all(|v| (v - 0.2).abs() < 1e-15));

        let out = fuse_saliency(&s1, &s2, &w, 16, 16).unwrap();
        assert_eq!((out.map.width, out.map.height), (16, 16));
        assert_eq!(out.source, MapSource::Fused);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let s1 = GrayMap::filled(2, 2, 0.2);
        let s2 = GrayMap::filled(3, 2, 0.8);
        let w = AttentionWeights::uniform(2, 2, 0.5);
        let err = fuse_low(&s1, &s2, &w).unwrap_err();
        assert!(err.to_string().contains("S2"));
    }

    #[test]
    fn tape_modes_match_closed_forms() {
        let store = build_fusion(3, 4, 1).unwrap();
        let f = feature(3, 2, 2, 5);
        let s1 = Tensor::from_fn(&[1, 1, 2, 2], |i| 0.1 + 0.2 * i as f64);
        let s2 = Tensor::from_fn(&[1, 1, 2, 2], |i| 0.9 - 0.1 * i as f64);
        for mode in [FusionMode::Attention, FusionMode::Average, FusionMode::Conv1x1] {
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let a = tape.constant(s1.clone());
            let b = tape.constant(s2.clone());
            let mut params = IndexMap::new();
            let out = record_fusion(&mut tape, &store, mode, fv, a, b, &mut params, false).unwrap();
            let got = tape.value(out).data().to_vec();
            let expect: Vec<f64> = match mode {
                FusionMode::Attention => {
                    let w = attention_forward(&f, &store).unwrap();
                    let g1 = GrayMap::from_tensor(&s1).unwrap();
                    let g2 = GrayMap::from_tensor(&s2).unwrap();
                    fuse_low(&g1, &g2, &w).unwrap().data
                }
                FusionMode::Average => s1.data().iter().zip(s2.data()).map(|(x, y)| (x + y) * 0.5).collect(),
                FusionMode::Conv1x1 => s1
                    .data()
                    .iter()
                    .zip(s2.data())
                    .map(|(x, y)| 1.0 / (1.0 + (-(0.5 * x + 0.5 * y)).exp()))
                    .collect(),
            };
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-12, "{mode}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [FusionMode::Attention, FusionMode::Average, FusionMode::Conv1x1] {
            assert_eq!(m.name().parse::<FusionMode>().unwrap(), m);
        }
        assert!("max".parse::<FusionMode>().is_err());
    }
}
