//! Boundary-weighted structure loss on a square mask: the weight map, and
//! how each term reacts to a sharp, a blurry and an inverted prediction.
//!
//! ```text
//! cargo run --release --example structure_loss
//! ```

use ndarray::{s, Array4};
use sam3unet::losses::{structure_loss, weight_map, weighted_bce, weighted_iou, LossConfig};
use sam3unet_tensor::Graph;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n = 24;
    let mut gt = Array4::zeros((1, 1, n, n));
    gt.slice_mut(s![0, 0, 6..18, 6..18]).fill(1.0);
    let cfg = LossConfig { pool_kernel: 7, ..LossConfig::default() };
    let w = weight_map(&gt, &cfg)?;

    println!("weight map (row 12):");
    let row: Vec<String> = (0..n).map(|j| format!("{:.1}", w[[0, 0, 12, j]])).collect();
    println!("  {}", row.join(" "));

    let sharp = gt.mapv(|g| if g > 0.5 { 6.0 } else { -6.0 });
    let blurry = gt.mapv(|g| if g > 0.5 { 0.5 } else { -0.5 });
    let inverted = sharp.mapv(|v| -v);
    println!("\n{:<10} {:>8} {:>8} {:>10}", "logits", "wBCE", "wIoU", "structure");
    for (name, logits) in [("sharp", sharp), ("blurry", blurry), ("inverted", inverted)] {
        let graph = Graph::no_grad();
        let l = graph.constant(logits.into_dyn());
        println!(
            "{name:<10} {:>8.4} {:>8.4} {:>10.4}",
            weighted_bce(l, &gt, &w)?.item(),
            weighted_iou(l, &gt, &w, cfg.epsilon)?.item(),
            structure_loss(l, &gt, &cfg)?.item()
        );
    }
    Ok(())
}
