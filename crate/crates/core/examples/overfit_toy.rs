//! Overfits the toy model on four synthetic images and reports the final
//! loss and IoU.
//!
//! ```text
//! cargo run --release --example overfit_toy -- [steps] [lr]
//! ```

use sam3unet::data::{index_dataset, make_synthetic, preprocess, Batch, DataConfig, SamplePair, SyntheticConfig};
use sam3unet::encoder::EncoderConfig;
use sam3unet::losses::{structure_loss, LossConfig};
use sam3unet::nn::{Ctx, NormMode};
use sam3unet_tensor::Graph;
use sam3unet::metrics::MetricsConfig;
use sam3unet::model::Sam3UNet;
use sam3unet::trainer::{evaluate_pairs, train, TrainConfig, TrainOptions};

/// Structure loss of each head on the unaugmented set, running statistics.
fn head_losses(model: &Sam3UNet, pairs: &[SamplePair], data: &DataConfig) -> Result<Vec<f64>, Box<dyn std::error::Error>> {
    let samples: Vec<_> = pairs.iter().enumerate().map(|(i, p)| preprocess(p, data, false, 0, i)).collect::<Result<_, _>>()?;
    let batch = Batch::collate((0..samples.len()).collect(), samples);
    let graph = Graph::no_grad();
    let ctx = Ctx::new(&graph, NormMode::Running);
    let out = model.forward(&ctx, ctx.input(batch.images.into_dyn()))?;
    let cfg = LossConfig::default();
    Ok(out.decoder.logits.iter().map(|&l| structure_loss(l, &batch.masks, &cfg).map(|v| v.item())).collect::<Result<_, _>>()?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let lr: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5e-3);

    let root = std::env::temp_dir().join(format!("sam3unet-overfit-{}", std::process::id()));
    make_synthetic(&root, &SyntheticConfig::new(4, 84, 0))?;
    let data = DataConfig { root: root.clone(), input_size: (84, 84), ..DataConfig::default() };
    let pairs = index_dataset(&data)?.pairs;

    let mut model = Sam3UNet::new(&EncoderConfig::toy(), 0)?;
    let cfg = TrainConfig {
        lr,
        epochs: steps,
        batch_size: 4,
        checkpoint_every: 0,
        checkpoint_dir: root.join("run"),
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let outcome = train(&mut model, &pairs, &data, &cfg, &LossConfig::default(), TrainOptions::default())?;
    for r in outcome.history.iter().step_by((steps / 10).max(1)) {
        println!("step {:>4}  lr {:.2e}  loss {:.4}", r.step, r.lr, r.loss);
    }
    let last = outcome.history.last().expect("at least one step");
    let scores = evaluate_pairs(&model, &pairs, &data, &MetricsConfig::default())?;
    println!("final loss {:.4}  train IoU {:.4}  MAE {:.4}  ({:.1?})", last.loss, scores.iou, scores.mae, start.elapsed());
    for (k, loss) in head_losses(&model, &pairs, &data)?.iter().enumerate() {
        println!("head d{} structure loss {:.4}", 3 - k, loss);
    }
    std::fs::remove_dir_all(&root)?;
    Ok(())
}
