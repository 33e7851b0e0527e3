//! Trains both streams and the contour detector on synthetic data, then
//! prints the metric table for every variant.
//!
//! Usage: `cargo run --release --example train_and_evaluate [config]`

use std::time::Instant;

use anyhow::Result;
use dcl::config::PipelineConfig;
use dcl::data::{synthetic_samples, TEST_SEED_OFFSET};
use dcl::pipeline::{evaluate, Model, Variant};
use dcl::train::{alternate_train, train_contour, TrainOptions};

fn main() -> Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => PipelineConfig::load(p.as_ref())?,
        None => PipelineConfig::default(),
    };
    let n = cfg.image_size;
    let train = synthetic_samples(cfg.train_samples, cfg.seed, n, n);
    let test = synthetic_samples(cfg.test_samples, cfg.seed.wrapping_add(TEST_SEED_OFFSET), n, n);
    let opts = TrainOptions { verbose: true, ..Default::default() };

    let t = Instant::now();
    let (trained, _) = alternate_train(&cfg, &train, &opts)?;
    eprintln!("saliency training took {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let (contour, _) = train_contour(&cfg, &train, &opts)?;
    eprintln!("contour training took {:.1}s", t.elapsed().as_secs_f64());
    let model = Model { contour: Some(contour), ..trained };

    let t = Instant::now();
    let report = evaluate(&cfg, &model, &test, &Variant::ALL, "synthetic")?;
    eprintln!("evaluation took {:.1}s", t.elapsed().as_secs_f64());
    print!("{}", report.table.to_csv());
    Ok(())
}
