//! Parses a configuration, initializes a model and round-trips it through the
//! binary weight format.

use anyhow::Result;
use dcl::config::PipelineConfig;
use dcl::pipeline::Model;
use dcl::weights_io::{decode_weights, encode_weights};

const CONFIG: &str = "
# smaller heads for a quick run
seed = 3
mlp.hidden = 32
fusion.mode = attention
crf.normalize = false
";

fn main() -> Result<()> {
    let cfg = PipelineConfig::parse(CONFIG)?;
    println!("seed {}, mlp hidden {}, fusion {}", cfg.seed, cfg.mlp_hidden, cfg.fusion);

    match PipelineConfig::parse("crf.w3 = 1") {
        Ok(_) => unreachable!(),
        Err(e) => println!("rejected: {e}"),
    }

    let model = Model::init(&cfg, cfg.seed)?;
    let bytes = encode_weights(&model.weights)?;
    let back = decode_weights(&bytes, "memory")?;
    println!("{} tensors, {} bytes, identical: {}", back.len(), bytes.len(), back == model.weights);
    Ok(())
}
