//! Every evaluation measure on a few hand-made predictions.
//!
//! ```text
//! cargo run --release --example metrics_demo
//! ```

use ndarray::{s, Array2};
use sam3unet::metrics::{score_image, FMode, MetricsConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut gt = Array2::zeros((32, 32));
    gt.slice_mut(s![8..24, 10..22]).fill(1.0);

    let mut shifted = Array2::zeros((32, 32));
    shifted.slice_mut(s![10..26, 12..24]).fill(0.9);
    let soft = gt.mapv(|g: f64| 0.25 + 0.5 * g);
    let empty = Array2::zeros((32, 32));
    let cases = [("perfect", gt.clone()), ("shifted", shifted), ("soft", soft), ("empty", empty)];

    for mode in [FMode::Adaptive, FMode::Max] {
        let cfg = MetricsConfig { f_mode: mode, ..MetricsConfig::default() };
        println!("F mode {mode:?}");
        println!("  {:<8} {:>7} {:>7} {:>7} {:>7} {:>7}", "case", "IoU", "F", "MAE", "S", "E");
        for (name, pred) in &cases {
            let sc = score_image(pred.view(), gt.view(), &cfg)?;
            println!(
                "  {name:<8} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                sc.iou, sc.f_measure, sc.mae, sc.s_measure, sc.e_measure_mean
            );
        }
    }
    Ok(())
}
