//! Writes a small synthetic corpus (PPM images, PGM masks, manifest) and
//! reads it back through the manifest.

use anyhow::Result;
use dcl::data::{generate_synthetic_dataset, DatasetManifest, Split};

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("dcl_synth_example");
    let manifest = generate_synthetic_dataset(6, 42, &dir, (64, 64), Split::Train)?;
    println!("wrote {} pairs to {}", manifest.len(), dir.display());

    let back = DatasetManifest::load(&dir.join("manifest.txt"))?;
    for s in back.load_samples()? {
        let frac = s.mask.count_ones() as f64 / (s.mask.width * s.mask.height) as f64;
        println!("{}: {}x{}, {:.1}% salient", s.name, s.image.width, s.image.height, 100.0 * frac);
    }
    Ok(())
}
