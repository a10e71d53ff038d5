//! Scores a folder of predicted masks against ground truth and writes the
//! text and JSON reports. Without arguments a small demo pair of folders is
//! generated from synthetic masks with a one-pixel shift.
//!
//! ```text
//! cargo run --release --example evaluate_folder -- [pred_dir gt_dir]
//! ```

use image::GrayImage;
use sam3unet::data::{make_synthetic, SyntheticConfig};
use sam3unet::metrics::{evaluate_folder, MetricsConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = tempfile::tempdir()?;
    let (pred, gt) = match args.as_slice() {
        [p, g] => (p.into(), g.into()),
        _ => {
            let summary = make_synthetic(&dir.path().join("synthetic"), &SyntheticConfig::new(5, 64, 3))?;
            let gt = summary.root.join("masks");
            let pred = dir.path().join("pred");
            std::fs::create_dir_all(&pred)?;
            for id in &summary.ids {
                let mask = image::open(gt.join(format!("{id}.png")))?.to_luma8();
                let (w, h) = mask.dimensions();
                GrayImage::from_fn(w, h, |x, y| *mask.get_pixel(x.saturating_sub(1), y)).save(pred.join(format!("{id}.png")))?;
            }
            (pred, gt)
        }
    };
    let report = evaluate_folder("demo", &pred, &gt, &MetricsConfig::default())?;
    print!("{}", report.to_text());
    report.write(&dir.path().join("metrics.txt"), &dir.path().join("metrics.json"))?;
    println!("{}", report.to_json());
    Ok(())
}
