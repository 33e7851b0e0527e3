//! Alternate training of the two streams, and contour-detector training.
//!
//! Phase 0 fits the segment MLP on descriptors from the initial backbone.
//! Each alternation then runs one epoch of the fully convolutional stream
//! plus attention (segment stream frozen, its map recomputed from the
//! current features and treated as a constant), followed by one epoch of the
//! segment MLP on descriptors from the updated backbone.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::{downsample_to_low, record_fusion};
use crate::image::{BinaryMap, RgbImage};
use crate::msfcn::{build_msfcn, forward_msfcn, prepare_contour_gt, record_msfcn, WeightStore};
use crate::pipeline::{segment_stream_map, Model};
use crate::segment_stream::{
    descriptor_batch, level_descriptors, project_rf_centers, record_mlp, FeatureView, RfProjection,
    SegmentDescriptor,
};
use crate::segmentation::{multi_level_segment, segment_saliency_label, SegmentationLevel};
use crate::tensor::optim::{clip_grad_norm, sgd_step_scaled, OptimizerState};
use crate::tensor::{Tape, Tensor, Var};
use crate::weights_io::save_weights;

/// One training view (a sample or its mirror) with everything that does not
/// depend on the weights.
pub struct TrainView {
    pub image: RgbImage,
    pub input: Tensor,
    pub gt: Vec<f64>,
    pub levels: Vec<SegmentationLevel>,
    /// Per level, per segment target in {0, 1}.
    pub labels: Vec<Vec<f64>>,
}

impl TrainView {
    pub fn new(image: RgbImage, mask: &BinaryMap, cfg: &PipelineConfig) -> Result<Self> {
        let levels = multi_level_segment(&image, &cfg.levels)?;
        let labels = levels
            .iter()
            .map(|l| l.segments.iter().map(|s| segment_saliency_label(s, mask) as f64).collect())
            .collect();
        Ok(Self {
            input: image.to_input_tensor(),
            gt: mask.as_f64(),
            image,
            levels,
            labels,
        })
    }
}

/// Builds the training views (with mirrored copies when enabled). Images
/// must already be a multiple of 8 on each side.
pub fn prepare_views(samples: &[Sample], cfg: &PipelineConfig) -> Result<Vec<TrainView>> {
    for s in samples {
        if s.image.width % 8 != 0 || s.image.height % 8 != 0 {
            return Err(Error::Dataset {
                path: PathBuf::from(&s.name),
                message: format!("training image is {}x{}; sides must be multiples of 8", s.image.width, s.image.height),
            });
        }
    }
    let mut jobs: Vec<(RgbImage, BinaryMap)> = Vec::new();
    for s in samples {
        jobs.push((s.image.clone(), s.mask.clone()));
        if cfg.train.flip {
            jobs.push((s.image.flip_horizontal(), s.mask.flip_horizontal()));
        }
    }
    jobs.into_par_iter().map(|(img, mask)| TrainView::new(img, &mask, cfg)).collect()
}

/// Progress notes, one per finished phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseLog {
    pub phase: String,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for per-phase checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    pub verbose: bool,
}

fn is_backbone(name: &str) -> bool {
    name.starts_with("stage")
}

fn collect_grads(tape: &Tape, params: &IndexMap<String, Var>) -> IndexMap<String, Vec<f64>> {
    params
        .iter()
        .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.to_vec())))
        .collect()
}

fn check_loss(loss: f64, phase: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("{phase}: loss is {loss}")))
    }
}

fn view_descriptors(view: &TrainView, feature: &Tensor, rf: &RfProjection, cfg: &PipelineConfig) -> Result<Vec<SegmentDescriptor>> {
    let fm = FeatureView::from_tensor(feature)?;
    let mut out = Vec::new();
    for (li, level) in view.levels.iter().enumerate() {
        out.extend(level_descriptors(level, li, fm, rf, cfg.pool_mode)?);
    }
    Ok(out)
}

fn view_labels(view: &TrainView) -> Vec<f64> {
    view.labels.iter().flatten().copied().collect()
}

/// Descriptors and targets for every view, from the current backbone.
fn extract_segment_data(
    weights: &WeightStore,
    views: &[TrainView],
    cfg: &PipelineConfig,
) -> Result<Vec<(Vec<SegmentDescriptor>, Vec<f64>)>> {
    views
        .par_iter()
        .map(|v| {
            let out = forward_msfcn(weights, &cfg.net, &v.input)?;
            let rf = project_rf_centers(&cfg.net, v.image.height, v.image.width);
            Ok((view_descriptors(v, &out.feature, &rf, cfg)?, view_labels(v)))
        })
        .collect()
}

/// One epoch of MLP updates over batches of `batch_images` source images.
fn mlp_epoch(
    model: &mut Model,
    data: &[(Vec<SegmentDescriptor>, Vec<f64>)],
    cfg: &PipelineConfig,
    opt: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
    phase: &str,
) -> Result<f64> {
    let per_image = if cfg.train.flip { 2 } else { 1 };
    let mut order: Vec<usize> = (0..data.len() / per_image).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in order.chunks(cfg.train.batch_images) {
        let mut descs = Vec::new();
        let mut labels = Vec::new();
        for &i in batch {
            for k in 0..per_image {
                let (d, l) = &data[i * per_image + k];
                descs.extend(d.iter().cloned());
                labels.extend_from_slice(l);
            }
        }
        if descs.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let x = tape.constant(descriptor_batch(&descs)?);
        let vars = record_mlp(&mut tape, &model.weights, x, true)?;
        let loss = tape.squared_error(vars.scores, &labels)?;
        let lv = check_loss(tape.value(loss).scalar_value(), phase)?;
        tape.backward(loss)?;
        let params: IndexMap<String, Var> = vars.params.into_iter().collect();
        let mut grads = collect_grads(&tape, &params);
        clip_grad_norm(&mut grads, cfg.train.clip_norm);
        sgd_step_scaled(&mut model.weights.tensors, &grads, opt, |_| 1.0)?;
        total += lv;
        count += labels.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Forward pass of stream 1 + attention fusion with the segment map held
/// constant. Returns the loss value; gradients are left on the tape.
fn fused_loss(
    tape: &mut Tape,
    model: &Model,
    view: &TrainView,
    rf: &RfProjection,
    cfg: &PipelineConfig,
) -> Result<(Var, IndexMap<String, Var>)> {
    let x = tape.constant(view.input.clone());
    let vars = record_msfcn(tape, &model.weights, &cfg.net, x, true)?;
    let s2 = segment_stream_map(tape.value(vars.feature), &view.levels, rf, &model.mlp(), cfg.pool_mode)?;
    let s2_low = tape.constant(downsample_to_low(&s2.map)?.to_tensor());
    let mut params = vars.params;
    let fused_low = record_fusion(tape, &model.weights, cfg.fusion, vars.feature, vars.s1_low, s2_low, &mut params, true)?;
    let fused = tape.bilinear_resize(fused_low, view.image.height, view.image.width)?;
    let loss = tape.balanced_bce(fused, &view.gt)?;
    Ok((loss, params))
}

/// Mean balanced cross-entropy of the fused map over `views`, without updates.
pub fn fused_loss_mean(model: &Model, views: &[TrainView], cfg: &PipelineConfig) -> Result<f64> {
    let losses = views
        .par_iter()
        .map(|v| {
            let rf = project_rf_centers(&cfg.net, v.image.height, v.image.width);
            let mut tape = Tape::new();
            let (loss, _) = fused_loss(&mut tape, model, v, &rf, cfg)?;
            Ok(tape.value(loss).scalar_value())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn stream1_epoch(
    model: &mut Model,
    views: &[TrainView],
    cfg: &PipelineConfig,
    opt: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
    phase: &str,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.shuffle(rng);
    let backbone_mult = if cfg.train.lr_new > 0.0 { cfg.train.lr_backbone / cfg.train.lr_new } else { 0.0 };
    let mut total = 0.0;
    for &i in &order {
        let v = &views[i];
        let rf = project_rf_centers(&cfg.net, v.image.height, v.image.width);
        let mut tape = Tape::new();
        let (loss, params) = fused_loss(&mut tape, model, v, &rf, cfg)?;
        let lv = check_loss(tape.value(loss).scalar_value(), phase)?;
        tape.backward(loss)?;
        // The MLP only sees detached inputs here, so it never receives gradients.
        let mut grads = collect_grads(&tape, &params);
        clip_grad_norm(&mut grads, cfg.train.clip_norm);
        sgd_step_scaled(&mut model.weights.tensors, &grads, opt, |n| if is_backbone(n) { backbone_mult } else { 1.0 })?;
        total += lv;
    }
    Ok(total / views.len().max(1) as f64)
}

fn checkpoint(opts: &TrainOptions, model: &Model, phase: &str) -> Result<()> {
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        save_weights(&dir.join(format!("{phase}.dclw")), &model.weights)?;
        save_weights(&dir.join("last.dclw"), &model.weights)?;
    }
    Ok(())
}

fn new_opt(base_lr: f64, max_iter: usize, cfg: &PipelineConfig) -> OptimizerState {
    let mut o = OptimizerState::new(base_lr, max_iter as u64);
    o.momentum = cfg.train.momentum;
    o.weight_decay = cfg.train.weight_decay;
    o
}

/// Alternate training from a fresh initialization seeded by `cfg.seed`.
pub fn alternate_train(cfg: &PipelineConfig, samples: &[Sample], opts: &TrainOptions) -> Result<(Model, Vec<PhaseLog>)> {
    let model = Model::init(cfg, cfg.seed)?;
    let views = prepare_views(samples, cfg)?;
    alternate_train_views(cfg, model, &views, opts)
}

/// Alternate training starting from `model`.
pub fn alternate_train_views(
    cfg: &PipelineConfig,
    mut model: Model,
    views: &[TrainView],
    opts: &TrainOptions,
) -> Result<(Model, Vec<PhaseLog>)> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa17e);
    let per_image = if cfg.train.flip { 2 } else { 1 };
    let mlp_batches = (views.len() / per_image).div_ceil(cfg.train.batch_images);
    let mut mlp_opt = new_opt(
        cfg.train.lr_mlp,
        mlp_batches * (cfg.train.init_epochs + cfg.train.alternations),
        cfg,
    );
    let mut s1_opt = new_opt(cfg.train.lr_new, views.len() * cfg.train.alternations, cfg);
    let mut log = Vec::new();
    let note = |log: &mut Vec<PhaseLog>, phase: String, loss: f64| {
        if opts.verbose {
            eprintln!("{phase}: mean loss {loss:.6}");
        }
        log.push(PhaseLog { phase, mean_loss: loss });
    };

    let data = extract_segment_data(&model.weights, views, cfg)?;
    for e in 0..cfg.train.init_epochs {
        let phase = format!("init.epoch{e}");
        let loss = mlp_epoch(&mut model, &data, cfg, &mut mlp_opt, &mut rng, &phase)?;
        note(&mut log, phase, loss);
    }
    checkpoint(opts, &model, "init")?;

    for a in 0..cfg.train.alternations {
        let phase = format!("alt{a}.stream1");
        let loss = stream1_epoch(&mut model, views, cfg, &mut s1_opt, &mut rng, &phase)?;
        note(&mut log, phase.clone(), loss);
        checkpoint(opts, &model, &phase)?;

        let phase = format!("alt{a}.stream2");
        let data = extract_segment_data(&model.weights, views, cfg)?;
        let loss = mlp_epoch(&mut model, &data, cfg, &mut mlp_opt, &mut rng, &phase)?;
        note(&mut log, phase.clone(), loss);
        checkpoint(opts, &model, &phase)?;
    }
    Ok((model, log))
}

/// Trains the contour detector: the same network fitted to salient-region
/// boundary maps with the boundary class balance.
pub fn train_contour(cfg: &PipelineConfig, samples: &[Sample], opts: &TrainOptions) -> Result<(WeightStore, Vec<PhaseLog>)> {
    let mut weights = build_msfcn(&cfg.net, cfg.seed.wrapping_add(101))?;
    let mut views: Vec<(Tensor, Vec<f64>)> = Vec::new();
    for s in samples {
        let gt = prepare_contour_gt(&s.mask);
        views.push((s.image.to_input_tensor(), gt.as_f64()));
        if cfg.train.flip {
            views.push((s.image.flip_horizontal().to_input_tensor(), gt.flip_horizontal().as_f64()));
        }
    }
    if views.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut opt = new_opt(cfg.train.lr_contour, views.len() * cfg.train.contour_epochs, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0de);
    let mut log = Vec::new();
    for e in 0..cfg.train.contour_epochs {
        let phase = format!("contour.epoch{e}");
        let mut order: Vec<usize> = (0..views.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (input, gt) = &views[i];
            let (_, _, h, w) = input.nchw()?;
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let vars = record_msfcn(&mut tape, &weights, &cfg.net, x, true)?;
            let up = tape.bilinear_resize(vars.s1_low, h, w)?;
            let loss = tape.balanced_bce(up, gt)?;
            total += check_loss(tape.value(loss).scalar_value(), &phase)?;
            tape.backward(loss)?;
            let mut grads = collect_grads(&tape, &vars.params);
            clip_grad_norm(&mut grads, cfg.train.clip_norm);
            sgd_step_scaled(&mut weights.tensors, &grads, &mut opt, |_| 1.0)?;
        }
        let loss = total / views.len() as f64;
        if opts.verbose {
            eprintln!("{phase}: mean loss {loss:.6}");
        }
        log.push(PhaseLog { phase, mean_loss: loss });
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            save_weights(&dir.join("contour_last.dclw"), &weights)?;
        }
    }
    Ok((weights, log))
}

/// Loads a checkpoint written by [`alternate_train`].
pub fn load_checkpoint(dir: &Path) -> Result<WeightStore> {
    crate::weights_io::load_weights(&dir.join("last.dclw"))
}
