//! Inference and evaluation over whole images and datasets.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::crf::{contour_embedding, mean_field_infer, EMBEDDING_DIM};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{evaluate_maps, MetricTable, Metrics};
use crate::fusion::{build_fusion, downsample_to_low, record_fusion, FusionMode};
use crate::image::{write_gray, BinaryMap, GrayMap, MapSource, RgbImage, SaliencyMap};
use crate::msfcn::{build_msfcn, forward_msfcn, max_over_maps, per_scale_maps, NetworkSpec, WeightStore, OUTPUT_STRIDE};
use crate::segment_stream::{
    descriptor_len, init_mlp, level_descriptors, project_rf_centers, render_s2, score_segments, FeatureView, PoolMode,
    RfProjection,
};
use crate::segmentation::{multi_level_segment, SegmentationLevel};
use crate::tensor::{bilinear_resize, Tape, Tensor};
use crate::weights_io::{load_weights, save_weights};

pub const MODEL_FILE: &str = "model.dclw";
pub const CONTOUR_FILE: &str = "contour.dclw";

/// Trained parameters: the two-stream saliency model and, optionally, the
/// separately trained contour detector (same network layout).
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub weights: WeightStore,
    pub contour: Option<WeightStore>,
}

impl Model {
    /// Freshly initialized saliency model.
    pub fn init(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        let mut weights = build_msfcn(&cfg.net, seed)?;
        let c = cfg.net.feature_channels();
        weights.merge(&build_fusion(c, cfg.attention_hidden, seed.wrapping_add(1))?);
        weights.merge(&init_mlp(descriptor_len(c), cfg.mlp_hidden, seed.wrapping_add(2))?);
        Ok(Self { weights, contour: None })
    }

    pub fn mlp(&self) -> WeightStore {
        self.weights.filter_prefix("mlp.")
    }

    /// Writes `model.dclw` (and `contour.dclw` when present) into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_weights(&dir.join(MODEL_FILE), &self.weights)?;
        if let Some(c) = &self.contour {
            save_weights(&dir.join(CONTOUR_FILE), c)?;
        }
        Ok(())
    }

    /// Loads from a directory, or from a model file whose sibling
    /// `contour.dclw` is picked up if it exists.
    pub fn load(path: &Path) -> Result<Self> {
        let (model, dir) = if path.is_dir() {
            (path.join(MODEL_FILE), path.to_path_buf())
        } else {
            (path.to_path_buf(), path.parent().unwrap_or(Path::new(".")).to_path_buf())
        };
        let weights = load_weights(&model)?;
        let cpath = dir.join(CONTOUR_FILE);
        let contour = if cpath.exists() { Some(load_weights(&cpath)?) } else { None };
        Ok(Self { weights, contour })
    }
}

/// Segmentation levels used by the single-level ablation.
pub const SINGLE_LEVEL_INDEX: usize = 1;

/// Segment-stream saliency from a feature map and precomputed segmentations.
pub fn segment_stream_map(
    feature: &Tensor,
    levels: &[SegmentationLevel],
    rf: &RfProjection,
    mlp: &WeightStore,
    pool: PoolMode,
) -> Result<SaliencyMap> {
    let fm = FeatureView::from_tensor(feature)?;
    let scores = levels
        .iter()
        .enumerate()
        .map(|(li, level)| score_segments(&level_descriptors(level, li, fm, rf, pool)?, mlp))
        .collect::<Result<Vec<_>>>()?;
    render_s2(levels, &scores)
}

/// Fuses low-resolution maps with the configured rule and upsamples.
pub fn fuse_maps(
    weights: &WeightStore,
    mode: FusionMode,
    feature: &Tensor,
    s1_low: &GrayMap,
    s2_low: &GrayMap,
    out_w: usize,
    out_h: usize,
) -> Result<SaliencyMap> {
    let mut tape = Tape::new();
    let f = tape.constant(feature.clone());
    let a = tape.constant(s1_low.to_tensor());
    let b = tape.constant(s2_low.to_tensor());
    let mut params = IndexMap::new();
    let low = record_fusion(&mut tape, weights, mode, f, a, b, &mut params, false)?;
    let up = bilinear_resize(tape.value(low), out_h, out_w)?;
    let mut map = GrayMap::from_tensor(&up)?;
    map.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(SaliencyMap::new(map, MapSource::Fused))
}

/// Lazily computed intermediate results for one (padded) image.
pub struct ImageRun<'a> {
    model: &'a Model,
    cfg: &'a PipelineConfig,
    image: RgbImage,
    orig_w: usize,
    orig_h: usize,
    forward: Option<(GrayMap, GrayMap, Tensor)>,
    s1_multi: Option<GrayMap>,
    levels: Option<Vec<SegmentationLevel>>,
    rf: Option<RfProjection>,
    s2: [Option<GrayMap>; 2],
    contour: Option<GrayMap>,
}

impl<'a> ImageRun<'a> {
    pub fn new(model: &'a Model, cfg: &'a PipelineConfig, image: &RgbImage) -> Self {
        Self {
            model,
            cfg,
            image: image.pad_to_multiple(OUTPUT_STRIDE),
            orig_w: image.width,
            orig_h: image.height,
            forward: None,
            s1_multi: None,
            levels: None,
            rf: None,
            s2: [None, None],
            contour: None,
        }
    }

    fn spec(&self) -> &NetworkSpec {
        &self.cfg.net
    }

    fn crop(&self, m: &GrayMap) -> GrayMap {
        if (m.width, m.height) == (self.orig_w, self.orig_h) {
            m.clone()
        } else {
            m.crop(self.orig_w, self.orig_h)
        }
    }

    /// `(S1 full-res, S1 low-res, feature map)` at scale 1, padded size.
    fn forward(&mut self) -> Result<&(GrayMap, GrayMap, Tensor)> {
        if self.forward.is_none() {
            let out = forward_msfcn(&self.model.weights, self.spec(), &self.image.to_input_tensor())?;
            self.forward = Some((out.s1.map, GrayMap::from_tensor(&out.s1_low)?, out.feature));
        }
        Ok(self.forward.as_ref().expect("just set"))
    }

    fn s1_padded(&mut self, multiscale: bool) -> Result<GrayMap> {
        if !multiscale {
            return Ok(self.forward()?.0.clone());
        }
        if self.s1_multi.is_none() {
            let single = self.forward()?.0.clone();
            let mut maps = vec![single];
            let others = per_scale_maps(&self.model.weights, &self.cfg.net, &self.image)?;
            maps.extend(others.into_iter().skip(1));
            self.s1_multi = Some(max_over_maps(&maps)?);
        }
        Ok(self.s1_multi.clone().expect("just set"))
    }

    pub fn s1(&mut self, multiscale: bool) -> Result<SaliencyMap> {
        let m = self.s1_padded(multiscale)?;
        Ok(SaliencyMap::new(self.crop(&m), MapSource::FullyConvolutional))
    }

    fn s2_padded(&mut self, single_level: bool) -> Result<GrayMap> {
        let slot = usize::from(single_level);
        if self.s2[slot].is_none() {
            if self.levels.is_none() {
                self.levels = Some(multi_level_segment(&self.image, &self.cfg.levels)?);
                self.rf = Some(project_rf_centers(self.spec(), self.image.height, self.image.width));
            }
            let feature = self.forward()?.2.clone();
            let levels = self.levels.as_ref().expect("set above");
            let chosen = if single_level {
                std::slice::from_ref(&levels[SINGLE_LEVEL_INDEX.min(levels.len() - 1)])
            } else {
                &levels[..]
            };
            let map = segment_stream_map(
                &feature,
                chosen,
                self.rf.as_ref().expect("set above"),
                &self.model.mlp(),
                self.cfg.pool_mode,
            )?;
            self.s2[slot] = Some(map.map);
        }
        Ok(self.s2[slot].clone().expect("just set"))
    }

    pub fn s2(&mut self, single_level: bool) -> Result<SaliencyMap> {
        let m = self.s2_padded(single_level)?;
        Ok(SaliencyMap::new(self.crop(&m), MapSource::SegmentStream))
    }

    fn fused_padded(&mut self, mode: FusionMode, multiscale: bool, single_level: bool) -> Result<GrayMap> {
        let s2_low = downsample_to_low(&self.s2_padded(single_level)?)?;
        let s1_low = if multiscale {
            downsample_to_low(&self.s1_padded(true)?)?
        } else {
            self.forward()?.1.clone()
        };
        let feature = self.forward()?.2.clone();
        let (w, h) = (self.image.width, self.image.height);
        Ok(fuse_maps(&self.model.weights, mode, &feature, &s1_low, &s2_low, w, h)?.map)
    }

    pub fn fused(&mut self, mode: FusionMode, multiscale: bool, single_level: bool) -> Result<SaliencyMap> {
        let m = self.fused_padded(mode, multiscale, single_level)?;
        Ok(SaliencyMap::new(self.crop(&m), MapSource::Fused))
    }

    fn contour_padded(&mut self) -> Result<GrayMap> {
        if self.contour.is_none() {
            let weights = self
                .model
                .contour
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("no contour weights loaded; run train-contour first".into()))?;
            let out = forward_msfcn(weights, self.spec(), &self.image.to_input_tensor())?;
            self.contour = Some(out.s1.map);
        }
        Ok(self.contour.clone().expect("just set"))
    }

    pub fn contour(&mut self) -> Result<SaliencyMap> {
        let m = self.contour_padded()?;
        Ok(SaliencyMap::new(self.crop(&m), MapSource::Contour))
    }

    /// CRF posterior on the configured fused map, at the original size.
    pub fn crf(&mut self, with_contour: bool) -> Result<SaliencyMap> {
        let fused = self.fused_padded(self.cfg.fusion, self.cfg.multiscale, false)?;
        let fused = self.crop(&fused);
        let orig = self.crop_image();
        let embedding = if with_contour {
            let c = self.contour_padded()?;
            let m = self.crop(&c);
            Some(contour_embedding(&m, self.cfg.crf.rho, EMBEDDING_DIM)?)
        } else {
            None
        };
        mean_field_infer(&fused, &orig, embedding.as_ref(), &self.cfg.crf)
    }

    fn crop_image(&self) -> RgbImage {
        if (self.image.width, self.image.height) == (self.orig_w, self.orig_h) {
            return self.image.clone();
        }
        let mut data = Vec::with_capacity(self.orig_w * self.orig_h * 3);
        for y in 0..self.orig_h {
            let start = y * self.image.width * 3;
            data.extend_from_slice(&self.image.data[start..start + self.orig_w * 3]);
        }
        RgbImage::new(self.orig_w, self.orig_h, data).expect("cropped size")
    }
}

/// Which maps [`infer`] should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InferRequest {
    pub s1: bool,
    pub s2: bool,
    pub fused: bool,
    pub contour: bool,
    pub crf: bool,
}

impl InferRequest {
    pub fn all() -> Self {
        Self {
            s1: true,
            s2: true,
            fused: true,
            contour: true,
            crf: true,
        }
    }

    pub fn only_s1() -> Self {
        Self {
            s1: true,
            s2: false,
            fused: false,
            contour: false,
            crf: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InferOutput {
    pub s1: Option<SaliencyMap>,
    pub s2: Option<SaliencyMap>,
    pub fused: Option<SaliencyMap>,
    pub contour: Option<SaliencyMap>,
    pub crf: Option<SaliencyMap>,
    /// Whether segmentation ran.
    pub segmented: bool,
}

/// Runs the pipeline on one image, computing only what `req` asks for.
/// Fusion mode, multi-scale input and the CRF's use of contours follow `cfg`.
pub fn infer(cfg: &PipelineConfig, model: &Model, image: &RgbImage, req: InferRequest) -> Result<InferOutput> {
    let mut run = ImageRun::new(model, cfg, image);
    let mut out = InferOutput::default();
    if req.s1 {
        out.s1 = Some(run.s1(cfg.multiscale)?);
    }
    if req.s2 {
        out.s2 = Some(run.s2(false)?);
    }
    if req.fused {
        out.fused = Some(run.fused(cfg.fusion, cfg.multiscale, false)?);
    }
    if req.contour {
        out.contour = Some(run.contour()?);
    }
    if req.crf {
        out.crf = Some(run.crf(cfg.crf_contour && model.contour.is_some())?);
    }
    out.segmented = run.levels.is_some();
    Ok(out)
}

/// Evaluation variants, mirroring a model-factor ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    S1,
    S1SingleScale,
    S2,
    S2SingleLevel,
    Fused,
    FusedSingleScale,
    FusedSingleLevel,
    FusedAverage,
    FusedConv1x1,
    CrfNoContour,
    Crf,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::S1,
        Variant::S1SingleScale,
        Variant::S2,
        Variant::S2SingleLevel,
        Variant::Fused,
        Variant::FusedSingleScale,
        Variant::FusedSingleLevel,
        Variant::FusedAverage,
        Variant::FusedConv1x1,
        Variant::CrfNoContour,
        Variant::Crf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::S1 => "s1",
            Variant::S1SingleScale => "s1-single-scale",
            Variant::S2 => "s2",
            Variant::S2SingleLevel => "s2-single-level",
            Variant::Fused => "fused",
            Variant::FusedSingleScale => "fused-single-scale",
            Variant::FusedSingleLevel => "fused-single-level",
            Variant::FusedAverage => "fused-average",
            Variant::FusedConv1x1 => "fused-conv1x1",
            Variant::CrfNoContour => "crf-no-contour",
            Variant::Crf => "crf",
        }
    }

    pub fn needs_contour(self) -> bool {
        self == Variant::Crf
    }

    pub fn is_crf(self) -> bool {
        matches!(self, Variant::Crf | Variant::CrfNoContour)
    }

    pub fn run(self, run: &mut ImageRun<'_>) -> Result<SaliencyMap> {
        let cfg = run.cfg;
        match self {
            Variant::S1 => run.s1(cfg.multiscale),
            Variant::S1SingleScale => run.s1(false),
            Variant::S2 => run.s2(false),
            Variant::S2SingleLevel => run.s2(true),
            Variant::Fused => run.fused(cfg.fusion, cfg.multiscale, false),
            Variant::FusedSingleScale => run.fused(cfg.fusion, false, false),
            Variant::FusedSingleLevel => run.fused(cfg.fusion, cfg.multiscale, true),
            Variant::FusedAverage => run.fused(FusionMode::Average, cfg.multiscale, false),
            Variant::FusedConv1x1 => run.fused(FusionMode::Conv1x1, cfg.multiscale, false),
            Variant::CrfNoContour => run.crf(false),
            Variant::Crf => run.crf(true),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.iter().copied().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::InvalidArgument(format!("unknown variant {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

/// Metrics and maps of one evaluation run.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub table: MetricTable,
    pub metrics: IndexMap<Variant, Metrics>,
    /// Per variant, one map per sample in manifest order.
    pub maps: IndexMap<Variant, Vec<GrayMap>>,
}

/// Runs every variant on every sample. Images are processed in parallel;
/// results keep sample order, so output does not depend on thread count.
pub fn evaluate(
    cfg: &PipelineConfig,
    model: &Model,
    samples: &[Sample],
    variants: &[Variant],
    dataset: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one sample".into()));
    }
    if model.contour.is_none() {
        if let Some(v) = variants.iter().find(|v| v.needs_contour()) {
            return Err(Error::InvalidArgument(format!("variant {v} needs contour weights")));
        }
    }
    let per_image: Vec<Vec<GrayMap>> = samples
        .par_iter()
        .map(|s| {
            let mut run = ImageRun::new(model, cfg, &s.image);
            variants
                .iter()
                .map(|v| v.run(&mut run).map(|m| m.map))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<BinaryMap> = samples.iter().map(|s| s.mask.clone()).collect();
    let mut table = MetricTable::default();
    let mut metrics = IndexMap::new();
    let mut maps = IndexMap::new();
    for (k, &v) in variants.iter().enumerate() {
        let vm: Vec<GrayMap> = per_image.iter().map(|m| m[k].clone()).collect();
        let m = evaluate_maps(&vm, &gts)?;
        table.push(dataset, v.name(), &m);
        metrics.insert(v, m);
        maps.insert(v, vm);
    }
    Ok(EvalReport { table, metrics, maps })
}

/// Writes `metrics.csv`, one `pr_<variant>.csv` per variant and the maps as
/// `maps/<variant>/<sample>.pgm`.
pub fn write_report(report: &EvalReport, samples: &[Sample], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    report.table.write(&out.join("metrics.csv"))?;
    for (v, m) in &report.metrics {
        fs::write(out.join(format!("pr_{v}.csv")), m.curve.to_csv())?;
    }
    for (v, maps) in &report.maps {
        let dir = out.join("maps").join(v.name());
        fs::create_dir_all(&dir)?;
        for (s, m) in samples.iter().zip(maps) {
            write_gray(&dir.join(format!("{}.pgm", s.name)), m)?;
        }
    }
    Ok(())
}

/// Resizes samples to `size × size` (nearest for masks) when `size > 0`.
pub fn conform_samples(samples: Vec<Sample>, size: usize) -> Result<Vec<Sample>> {
    if size == 0 {
        return Ok(samples);
    }
    samples
        .into_iter()
        .map(|s| {
            if (s.image.width, s.image.height) == (size, size) {
                return Ok(s);
            }
            Ok(Sample {
                image: s.image.resize(size, size)?,
                mask: s.mask.resize(size, size),
                name: s.name,
            })
        })
        .collect()
}
