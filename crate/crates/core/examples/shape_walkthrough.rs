//! Traces tensor shapes through encoder, pyramid and decoder for a 336×336
//! input at full width (one transformer block, since shapes do not depend
//! on depth).
//!
//! ```text
//! cargo run --release --example shape_walkthrough -- [size]
//! ```

use ndarray::Array4;
use sam3unet::encoder::EncoderConfig;
use sam3unet::model::Sam3UNet;
use sam3unet::nn::{Ctx, NormMode};
use sam3unet::pyramid::{level_sizes, STRIDES};
use sam3unet_tensor::Graph;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let size: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(336);
    let cfg = EncoderConfig { depth: 1, img_size: (size, size), ..EncoderConfig::sam3() };
    let model = Sam3UNet::new(&cfg, 0)?;

    let graph = Graph::no_grad();
    let ctx = Ctx::new(&graph, NormMode::Running);
    let out = model.forward(&ctx, ctx.input(Array4::<f64>::zeros((1, 3, size, size)).into_dyn()))?;

    println!("input          [1, 3, {size}, {size}]");
    println!("token grid     {:?}   (patch {})", out.embedding.shape(), cfg.patch_size);
    for ((level, stride), expect) in out.pyramid.levels.iter().zip(STRIDES).zip(level_sizes((size, size))) {
        println!("pyramid /{stride:<2}    {:?}   (floor rule {expect:?})", level.shape());
    }
    for (name, stage) in ["d3", "d2", "d1"].iter().zip(&out.decoder.stage_features) {
        println!("decoder {name}     {:?}", stage.shape());
    }
    for (name, logits) in ["head3", "head2", "head1"].iter().zip(&out.decoder.logits) {
        println!("{name} logits   {:?}", logits.shape());
    }
    Ok(())
}
