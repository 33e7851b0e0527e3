//! Precision-recall curve, maximum and adaptive F-measure and MAE for a few
//! hand-made maps.

use anyhow::Result;
use dcl::eval::{evaluate_maps, f_measure, BETA_SQ};
use dcl::image::{BinaryMap, GrayMap};

fn main() -> Result<()> {
    let gt = BinaryMap::new(4, 4, vec![1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0])?;
    let perfect = gt.to_gray();
    let soft = GrayMap::new(4, 4, gt.as_f64().iter().map(|g| 0.2 + 0.6 * g).collect())?;
    let inverted = GrayMap::new(4, 4, gt.as_f64().iter().map(|g| 1.0 - g).collect())?;

    for (name, m) in [("perfect", perfect), ("soft", soft), ("inverted", inverted)] {
        let r = evaluate_maps(&[m], std::slice::from_ref(&gt))?;
        println!(
            "{name:>8}: maxF {:.3}, adaptive P/R/F {:.3}/{:.3}/{:.3}, MAE {:.3}",
            r.max_f, r.adaptive_precision, r.adaptive_recall, r.adaptive_f, r.mae
        );
    }
    println!("F(P = 0.5, R = 1) = {:.4}", f_measure(0.5, 1.0, BETA_SQ));
    Ok(())
}
