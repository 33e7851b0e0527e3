use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dcl::config::PipelineConfig;
use dcl::crf::{contour_embedding, mean_field_infer, EMBEDDING_DIM};
use dcl::data::{generate_synthetic_dataset, DatasetManifest, Split, TEST_SEED_OFFSET};
use dcl::image::{read_gray, read_rgb, write_gray, write_labels16, GrayMap};
use dcl::pipeline::{conform_samples, evaluate, infer, write_report, InferRequest, Model, Variant, CONTOUR_FILE, MODEL_FILE};
use dcl::segmentation::multi_level_segment;
use dcl::train::{alternate_train, train_contour, TrainOptions};
use dcl::weights_io::save_weights;

#[derive(Parser)]
#[command(name = "dcl", version, about = "Two-stream salient object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic train/test corpus with manifests.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Alternate training of both streams.
    Train {
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Trains the contour detector.
    TrainContour {
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Saliency maps for one image.
    Infer {
        image: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum)]
        multiscale: Option<Switch>,
        #[arg(long)]
        no_crf: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Refines an existing saliency map with the dense CRF.
    Crf {
        image: PathBuf,
        /// Saliency map (PGM) to refine.
        saliency: PathBuf,
        /// Model directory with contour weights; omit for the plain CRF.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluates variants on a manifest and writes metrics, curves and maps.
    Eval {
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Variants to run (repeatable); defaults to all available.
        #[arg(long)]
        variant: Vec<Variant>,
        #[arg(long, value_enum)]
        multiscale: Option<Switch>,
        #[arg(long)]
        no_crf: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Multi-level segmentation label maps (16-bit PGM).
    Segment {
        image: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_switches(cfg: &mut PipelineConfig, multiscale: Option<Switch>, no_crf: bool) {
    if let Some(m) = multiscale {
        cfg.multiscale = matches!(m, Switch::On);
    }
    if no_crf {
        cfg.crf_enabled = false;
    }
}

fn load_samples(manifest: &Path, cfg: &PipelineConfig) -> Result<Vec<dcl::data::Sample>> {
    let m = DatasetManifest::load(manifest)?;
    let samples = m.load_samples().with_context(|| format!("loading {}", manifest.display()))?;
    Ok(conform_samples(samples, cfg.image_size)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            let size = (cfg.image_size, cfg.image_size);
            let train = generate_synthetic_dataset(cfg.train_samples, cfg.seed, &common.out.join("train"), size, Split::Train)?;
            let test = generate_synthetic_dataset(
                cfg.test_samples,
                cfg.seed.wrapping_add(TEST_SEED_OFFSET),
                &common.out.join("test"),
                size,
                Split::Test,
            )?;
            println!("wrote {} training and {} test images under {}", train.len(), test.len(), common.out.display());
        }
        Command::Train { manifest, common } => {
            let cfg = load_config(&common)?;
            let samples = load_samples(&manifest, &cfg)?;
            let opts = TrainOptions {
                checkpoint_dir: Some(common.out.join("checkpoints")),
                verbose: true,
            };
            let (model, _) = alternate_train(&cfg, &samples, &opts)?;
            fs::create_dir_all(&common.out)?;
            save_weights(&common.out.join(MODEL_FILE), &model.weights)?;
            fs::write(common.out.join("config.txt"), cfg.to_text())?;
            println!("saved {}", common.out.join(MODEL_FILE).display());
        }
        Command::TrainContour { manifest, common } => {
            let cfg = load_config(&common)?;
            let samples = load_samples(&manifest, &cfg)?;
            let opts = TrainOptions {
                checkpoint_dir: Some(common.out.join("checkpoints")),
                verbose: true,
            };
            let (weights, _) = train_contour(&cfg, &samples, &opts)?;
            fs::create_dir_all(&common.out)?;
            save_weights(&common.out.join(CONTOUR_FILE), &weights)?;
            println!("saved {}", common.out.join(CONTOUR_FILE).display());
        }
        Command::Infer {
            image,
            weights,
            multiscale,
            no_crf,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            apply_switches(&mut cfg, multiscale, no_crf);
            let model = Model::load(&weights)?;
            let img = read_rgb(&image)?;
            let has_contour = model.contour.is_some();
            if cfg.crf_enabled && cfg.crf_contour && !has_contour {
                bail!("no {CONTOUR_FILE} next to the weights; pass --no-crf or set crf.contour = false");
            }
            let req = InferRequest {
                contour: has_contour,
                crf: cfg.crf_enabled,
                ..InferRequest::all()
            };
            let out = infer(&cfg, &model, &img, req)?;
            fs::create_dir_all(&common.out)?;
            for m in [out.s1, out.s2, out.fused, out.contour, out.crf].into_iter().flatten() {
                let path = common.out.join(format!("{}.pgm", m.source.name()));
                write_gray(&path, &m.map)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Crf {
            image,
            saliency,
            weights,
            common,
        } => {
            let cfg = load_config(&common)?;
            let img = read_rgb(&image)?;
            let (w, h, bytes) = read_gray(&saliency)?;
            if (w, h) != (img.width, img.height) {
                bail!("saliency map is {w}x{h} but the image is {}x{}", img.width, img.height);
            }
            let s = GrayMap::from_u8(w, h, &bytes)?;
            let embedding = match weights {
                Some(p) => {
                    let model = Model::load(&p)?;
                    let Some(contour) = &model.contour else {
                        bail!("no contour weights found at {}", p.display());
                    };
                    let cm = Model {
                        weights: contour.clone(),
                        contour: Some(contour.clone()),
                    };
                    let out = infer(&cfg, &cm, &img, InferRequest { s1: false, s2: false, fused: false, contour: true, crf: false })?;
                    let m = out.contour.context("contour map missing")?;
                    Some(contour_embedding(&m.map, cfg.crf.rho, EMBEDDING_DIM)?)
                }
                None => None,
            };
            let refined = mean_field_infer(&s, &img, embedding.as_ref(), &cfg.crf)?;
            fs::create_dir_all(&common.out)?;
            let path = common.out.join("crf.pgm");
            write_gray(&path, &refined.map)?;
            println!("wrote {}", path.display());
        }
        Command::Eval {
            manifest,
            weights,
            variant,
            multiscale,
            no_crf,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            apply_switches(&mut cfg, multiscale, no_crf);
            let model = Model::load(&weights)?;
            let samples = load_samples(&manifest, &cfg)?;
            let variants: Vec<Variant> = if variant.is_empty() {
                Variant::ALL
                    .into_iter()
                    .filter(|v| cfg.crf_enabled || !v.is_crf())
                    .filter(|v| model.contour.is_some() || !v.needs_contour())
                    .collect()
            } else {
                variant
            };
            let dataset = manifest
                .parent()
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into());
            let report = evaluate(&cfg, &model, &samples, &variants, &dataset)?;
            write_report(&report, &samples, &common.out)?;
            print!("{}", report.table.to_csv());
        }
        Command::Segment { image, common } => {
            let cfg = load_config(&common)?;
            let img = read_rgb(&image)?;
            let levels = multi_level_segment(&img, &cfg.levels)?;
            fs::create_dir_all(&common.out)?;
            for (i, level) in levels.iter().enumerate() {
                let path = common.out.join(format!("level{}.pgm", i + 1));
                write_labels16(&path, level.width, level.height, &level.labels)?;
                println!("{}: {} segments", path.display(), level.len());
            }
        }
    }
    Ok(())
}
