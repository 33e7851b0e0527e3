//! Spectral embedding of a contour map: a ring splits the plane into inside
//! and outside, which the second eigenvector separates.

use anyhow::Result;
use dcl::crf::contour_embedding;
use dcl::image::GrayMap;

fn main() -> Result<()> {
    let n = 32;
    let c = (n as f64 - 1.0) / 2.0;
    let contour = GrayMap::new(
        n,
        n,
        (0..n * n)
            .map(|i| {
                let (r, col) = ((i / n) as f64, (i % n) as f64);
                let d = ((r - c).powi(2) + (col - c).powi(2)).sqrt();
                if (d - 9.0).abs() < 1.0 { 1.0 } else { 0.0 }
            })
            .collect(),
    )?;
    let emb = contour_embedding(&contour, 0.1, 8)?;
    let values: Vec<String> = emb.eigenvalues.iter().map(|v| format!("{v:.2e}")).collect();
    println!("eigenvalues: {}", values.join(", "));
    let centre = emb.pixel((n / 2) * n + n / 2)[1];
    let corner = emb.pixel(0)[1];
    println!("second coordinate: centre {centre:.3e}, corner {corner:.3e} (opposite signs)");
    for w in &emb.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
