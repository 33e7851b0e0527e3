//! Line-oriented `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! Unknown keys, repeated keys and malformed values are errors that name the
//! line.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::crf::CrfConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, ATTENTION_HIDDEN};
use crate::msfcn::NetworkSpec;
use crate::segment_stream::PoolMode;
use crate::segmentation::{default_levels, LevelParams};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Alternations of (stream 1 + attention) and (stream 2) epochs.
    pub alternations: usize,
    /// Epochs of stream-2 training on the initial features.
    pub init_epochs: usize,
    /// Base learning rate of the backbone convolutions.
    pub lr_backbone: f64,
    /// Base learning rate of side branches, head, fuse layer and attention.
    pub lr_new: f64,
    pub lr_mlp: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Images per stream-2 update.
    pub batch_images: usize,
    pub flip: bool,
    pub contour_epochs: usize,
    pub lr_contour: f64,
    /// Gradient L2 norm cap per update; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alternations: 8,
            init_epochs: 10,
            lr_backbone: 1e-3,
            lr_new: 1e-3,
            lr_mlp: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_images: 4,
            flip: true,
            contour_epochs: 6,
            lr_contour: 1e-3,
            clip_norm: 50.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Side of generated images; loaded images are resized to it unless 0.
    pub image_size: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub net: NetworkSpec,
    pub levels: Vec<LevelParams>,
    pub pool_mode: PoolMode,
    pub mlp_hidden: usize,
    pub attention_hidden: usize,
    pub fusion: FusionMode,
    pub multiscale: bool,
    pub crf_enabled: bool,
    pub crf_contour: bool,
    pub crf: CrfConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            image_size: 64,
            train_samples: 200,
            test_samples: 50,
            net: NetworkSpec::default(),
            levels: default_levels().to_vec(),
            pool_mode: PoolMode::Max,
            mlp_hidden: 64,
            attention_hidden: ATTENTION_HIDDEN,
            fusion: FusionMode::Attention,
            multiscale: false,
            crf_enabled: true,
            crf_contour: true,
            crf: CrfConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        message: format!("invalid value {v:?} for {key}"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_value(line, key, p.trim())).collect()
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config {
            line,
            message: format!("invalid boolean {v:?} for {key}"),
        }),
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "image_size",
    "data.train_samples",
    "data.test_samples",
    "net.channels",
    "net.branch_channels",
    "net.head_channels",
    "seg.k",
    "seg.min_size",
    "seg.sigma",
    "segment.pool",
    "mlp.hidden",
    "attention.hidden",
    "fusion.mode",
    "multiscale",
    "crf.enabled",
    "crf.contour",
    "crf.w1",
    "crf.w2",
    "crf.sigma_alpha",
    "crf.sigma_beta",
    "crf.sigma_gamma",
    "crf.sigma_epsilon",
    "crf.rho",
    "crf.iterations",
    "crf.normalize",
    "train.alternations",
    "train.init_epochs",
    "train.lr_backbone",
    "train.lr_new",
    "train.lr_mlp",
    "train.momentum",
    "train.weight_decay",
    "train.batch_images",
    "train.flip",
    "train.contour_epochs",
    "train.lr_contour",
    "train.clip_norm",
];

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        let (mut ks, mut sizes, mut sigmas) = (None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, v) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key {key:?}"),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    message: format!("key {key:?} given twice"),
                });
            }
            match key {
                "seed" => cfg.seed = parse_value(line, key, v)?,
                "image_size" => cfg.image_size = parse_value(line, key, v)?,
                "data.train_samples" => cfg.train_samples = parse_value(line, key, v)?,
                "data.test_samples" => cfg.test_samples = parse_value(line, key, v)?,
                "net.channels" => {
                    let c: Vec<usize> = parse_list(line, key, v)?;
                    if c.len() != cfg.net.stages.len() {
                        return Err(Error::Config {
                            line,
                            message: format!("net.channels needs {} values", cfg.net.stages.len()),
                        });
                    }
                    for (s, c) in cfg.net.stages.iter_mut().zip(c) {
                        s.channels = c;
                    }
                }
                "net.branch_channels" => cfg.net.branch_channels = parse_value(line, key, v)?,
                "net.head_channels" => cfg.net.head_channels = parse_value(line, key, v)?,
                "seg.k" => ks = Some((line, parse_list::<f64>(line, key, v)?)),
                "seg.min_size" => sizes = Some((line, parse_list::<usize>(line, key, v)?)),
                "seg.sigma" => sigmas = Some((line, parse_list::<f64>(line, key, v)?)),
                "segment.pool" => {
                    cfg.pool_mode = match v {
                        "max" => PoolMode::Max,
                        "mean" => PoolMode::Mean,
                        _ => {
                            return Err(Error::Config {
                                line,
                                message: format!("segment.pool must be max or mean, got {v:?}"),
                            })
                        }
                    }
                }
                "mlp.hidden" => cfg.mlp_hidden = parse_value(line, key, v)?,
                "attention.hidden" => cfg.attention_hidden = parse_value(line, key, v)?,
                "fusion.mode" => {
                    cfg.fusion = v.parse().map_err(|e: Error| Error::Config {
                        line,
                        message: e.to_string(),
                    })?
                }
                "multiscale" => cfg.multiscale = parse_bool(line, key, v)?,
                "crf.enabled" => cfg.crf_enabled = parse_bool(line, key, v)?,
                "crf.contour" => cfg.crf_contour = parse_bool(line, key, v)?,
                "crf.w1" => cfg.crf.w1 = parse_value(line, key, v)?,
                "crf.w2" => cfg.crf.w2 = parse_value(line, key, v)?,
                "crf.sigma_alpha" => cfg.crf.sigma_alpha = parse_value(line, key, v)?,
                "crf.sigma_beta" => cfg.crf.sigma_beta = parse_value(line, key, v)?,
                "crf.sigma_gamma" => cfg.crf.sigma_gamma = parse_value(line, key, v)?,
                "crf.sigma_epsilon" => cfg.crf.sigma_epsilon = parse_value(line, key, v)?,
                "crf.rho" => cfg.crf.rho = parse_value(line, key, v)?,
                "crf.iterations" => cfg.crf.iterations = parse_value(line, key, v)?,
                "crf.normalize" => cfg.crf.normalize = parse_bool(line, key, v)?,
                "train.alternations" => cfg.train.alternations = parse_value(line, key, v)?,
                "train.init_epochs" => cfg.train.init_epochs = parse_value(line, key, v)?,
                "train.lr_backbone" => cfg.train.lr_backbone = parse_value(line, key, v)?,
                "train.lr_new" => cfg.train.lr_new = parse_value(line, key, v)?,
                "train.lr_mlp" => cfg.train.lr_mlp = parse_value(line, key, v)?,
                "train.momentum" => cfg.train.momentum = parse_value(line, key, v)?,
                "train.weight_decay" => cfg.train.weight_decay = parse_value(line, key, v)?,
                "train.batch_images" => cfg.train.batch_images = parse_value(line, key, v)?,
                "train.flip" => cfg.train.flip = parse_bool(line, key, v)?,
                "train.contour_epochs" => cfg.train.contour_epochs = parse_value(line, key, v)?,
                "train.lr_contour" => cfg.train.lr_contour = parse_value(line, key, v)?,
                "train.clip_norm" => cfg.train.clip_norm = parse_value(line, key, v)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        // Level lists override the matching field of every default level.
        if ks.is_some() || sizes.is_some() || sigmas.is_some() {
            let lens: Vec<(usize, usize)> = [
                ks.as_ref().map(|(l, v)| (*l, v.len())),
                sizes.as_ref().map(|(l, v)| (*l, v.len())),
                sigmas.as_ref().map(|(l, v)| (*l, v.len())),
            ]
            .into_iter()
            .flatten()
            .collect();
            if let Some(&(line, len)) = lens.iter().find(|(_, len)| *len != cfg.levels.len()) {
                return Err(Error::Config {
                    line,
                    message: format!("segmentation lists need {} values, got {len}", cfg.levels.len()),
                });
            }
            for (i, level) in cfg.levels.iter_mut().enumerate() {
                if let Some((_, v)) = &ks {
                    level.k = v[i];
                }
                if let Some((_, v)) = &sizes {
                    level.min_size = v[i];
                }
                if let Some((_, v)) = &sigmas {
                    level.sigma = v[i];
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.crf.validate()?;
        let bad = |m: String| Err(Error::Config { line: 0, message: m });
        if self.image_size != 0 && self.image_size < 8 {
            return bad(format!("image_size must be 0 or at least 8, got {}", self.image_size));
        }
        if self.mlp_hidden == 0 || self.attention_hidden == 0 {
            return bad("mlp.hidden and attention.hidden must be positive".into());
        }
        if self.train.batch_images == 0 {
            return bad("train.batch_images must be positive".into());
        }
        for (name, v) in [
            ("train.lr_backbone", self.train.lr_backbone),
            ("train.lr_new", self.train.lr_new),
            ("train.lr_mlp", self.train.lr_mlp),
            ("train.lr_contour", self.train.lr_contour),
            ("train.clip_norm", self.train.clip_norm),
            ("train.momentum", self.train.momentum),
            ("train.weight_decay", self.train.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        for (i, l) in self.levels.iter().enumerate() {
            if !(l.k > 0.0 && l.sigma >= 0.0 && l.min_size >= 1) {
                return bad(format!("segmentation level {} has invalid parameters {l:?}", i + 1));
            }
        }
        Ok(())
    }

    /// The configuration as parseable text.
    pub fn to_text(&self) -> String {
        let list = |v: Vec<String>| v.join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "data.train_samples = {}", self.train_samples);
        let _ = writeln!(s, "data.test_samples = {}", self.test_samples);
        let _ = writeln!(
            s,
            "net.channels = {}",
            list(self.net.stages.iter().map(|x| x.channels.to_string()).collect())
        );
        let _ = writeln!(s, "net.branch_channels = {}", self.net.branch_channels);
        let _ = writeln!(s, "net.head_channels = {}", self.net.head_channels);
        let _ = writeln!(s, "seg.k = {}", list(self.levels.iter().map(|l| format!("{:?}", l.k)).collect()));
        let _ = writeln!(s, "seg.min_size = {}", list(self.levels.iter().map(|l| l.min_size.to_string()).collect()));
        let _ = writeln!(s, "seg.sigma = {}", list(self.levels.iter().map(|l| format!("{:?}", l.sigma)).collect()));
        let _ = writeln!(
            s,
            "segment.pool = {}",
            if self.pool_mode == PoolMode::Max { "max" } else { "mean" }
        );
        let _ = writeln!(s, "mlp.hidden = {}", self.mlp_hidden);
        let _ = writeln!(s, "attention.hidden = {}", self.attention_hidden);
        let _ = writeln!(s, "fusion.mode = {}", self.fusion);
        let _ = writeln!(s, "multiscale = {}", self.multiscale);
        let _ = writeln!(s, "crf.enabled = {}", self.crf_enabled);
        let _ = writeln!(s, "crf.contour = {}", self.crf_contour);
        let c = &self.crf;
        let _ = writeln!(s, "crf.w1 = {:?}", c.w1);
        let _ = writeln!(s, "crf.w2 = {:?}", c.w2);
        let _ = writeln!(s, "crf.sigma_alpha = {:?}", c.sigma_alpha);
        let _ = writeln!(s, "crf.sigma_beta = {:?}", c.sigma_beta);
        let _ = writeln!(s, "crf.sigma_gamma = {:?}", c.sigma_gamma);
        let _ = writeln!(s, "crf.sigma_epsilon = {:?}", c.sigma_epsilon);
        let _ = writeln!(s, "crf.rho = {:?}", c.rho);
        let _ = writeln!(s, "crf.iterations = {}", c.iterations);
        let _ = writeln!(s, "crf.normalize = {}", c.normalize);
        let t = &self.train;
        let _ = writeln!(s, "train.alternations = {}", t.alternations);
        let _ = writeln!(s, "train.init_epochs = {}", t.init_epochs);
        let _ = writeln!(s, "train.lr_backbone = {:?}", t.lr_backbone);
        let _ = writeln!(s, "train.lr_new = {:?}", t.lr_new);
        let _ = writeln!(s, "train.lr_mlp = {:?}", t.lr_mlp);
        let _ = writeln!(s, "train.momentum = {:?}", t.momentum);
        let _ = writeln!(s, "train.weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(s, "train.batch_images = {}", t.batch_images);
        let _ = writeln!(s, "train.flip = {}", t.flip);
        let _ = writeln!(s, "train.contour_epochs = {}", t.contour_epochs);
        let _ = writeln!(s, "train.lr_contour = {:?}", t.lr_contour);
        let _ = writeln!(s, "train.clip_norm = {:?}", t.clip_norm);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(PipelineConfig::parse("# nothing\n\n").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut c = PipelineConfig::default();
        c.crf.w1 = 0.125;
        c.levels[1].k = 33.5;
        c.fusion = FusionMode::Conv1x1;
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn named_errors() {
        let e = PipelineConfig::parse("seed = 1\nbogus = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, .. }), "{e}");
        assert!(e.to_string().contains("bogus"));
        let e = PipelineConfig::parse("crf.w1 = abc").unwrap_err();
        assert!(e.to_string().contains("crf.w1"));
        let e = PipelineConfig::parse("seed = 1\nseed = 2").unwrap_err();
        assert!(e.to_string().contains("twice"));
        let e = PipelineConfig::parse("seg.k = 1, 2").unwrap_err();
        assert!(e.to_string().contains("3 values"));
        assert!(PipelineConfig::parse("no equals sign").is_err());
        assert!(PipelineConfig::parse("fusion.mode = max").is_err());
    }

    #[test]
    fn values_apply() {
        let c = PipelineConfig::parse("multiscale = off\nseg.k = 1,2,3 # comment\ncrf.iterations = 3").unwrap();
        assert!(!c.multiscale);
        assert_eq!(c.levels.iter().map(|l| l.k).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        assert_eq!(c.crf.iterations, 3);
    }
}
