//! Parameter and training-memory census at full scale and for the toy
//! configuration, computed from layer specs without allocating weights.
//!
//! ```text
//! cargo run --release --example param_census
//! ```

use sam3unet::encoder::EncoderConfig;
use sam3unet::model::ParameterCensus;

fn mib(bytes: usize) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (name, cfg) in [("full scale", EncoderConfig::sam3()), ("toy", EncoderConfig::toy())] {
        let census = ParameterCensus::for_config(&cfg)?;
        println!("== {name}: dim {} depth {} bottleneck {}", cfg.embed_dim, cfg.depth, cfg.adapter_bottleneck);
        println!("{census}");
        let mem = census.memory(4);
        println!(
            "f32 memory: frozen {:.1} MiB, trainable weights+grads+moments {:.1} MiB\n",
            mib(mem.frozen_weights),
            mib(mem.trainable_state())
        );
    }
    Ok(())
}
