//! Internal widths of the lightweight decoder block for a few channel
//! counts, observed during a real forward pass.
//!
//! ```text
//! cargo run --release --example lightweight_block
//! ```

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sam3unet::decoder::{LightweightBlock, LightweightBlockConfig};
use sam3unet::nn::{Ctx, NormMode};
use sam3unet::params::{ParamStore, Role};
use sam3unet_tensor::Graph;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("{:>5} {:>6} {:>10} {:>22} {:>8} {:>8} {:>8}", "C", "C_out", "reduce", "parts", "concat", "output", "params");
    for (c, c_out) in [(8, 8), (16, 16), (128, 128), (256, 128)] {
        let block = LightweightBlock::new("block", LightweightBlockConfig::new(c, c_out)?);
        let store = ParamStore::materialize(&block.specs(), &mut ChaCha8Rng::seed_from_u64(0));
        let graph = Graph::no_grad();
        let ctx = Ctx::new(&graph, NormMode::Running);
        let (_, trace) = block.forward_traced(&ctx, &store, ctx.input(Array4::<f64>::zeros((1, c, 6, 6)).into_dyn()))?;
        let parts: Vec<usize> = trace.parts.iter().map(|p| p[1]).collect();
        println!(
            "{c:>5} {c_out:>6} {:>10} {:>22} {:>8} {:>8} {:>8}",
            trace.reduced[1],
            format!("{parts:?}"),
            trace.concat[1],
            trace.output[1],
            store.numel(Role::Trainable)
        );
    }
    println!("\nparameter names of one block:");
    for spec in LightweightBlock::new("block", LightweightBlockConfig::new(16, 16)?).specs() {
        println!("  {:<28} {:?}", spec.name, spec.shape);
    }
    Ok(())
}
