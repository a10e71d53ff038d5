//! A freshly built encoder with adapters computes exactly what the bare
//! backbone computes, because every up-projection starts at zero. Nudging
//! one up-projection makes the two paths diverge.
//!
//! ```text
//! cargo run --release --example adapter_identity
//! ```

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sam3unet::encoder::{build_encoder, EncoderConfig};

fn max_diff(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = EncoderConfig::toy();
    let mut encoder = build_encoder(&cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = Array4::from_shape_fn((2, 3, 84, 84), |_| rng.random_range(-2.0..2.0));

    let adapted = encoder.encode(&images)?;
    let base = encoder.encode_base_only(&images)?;
    println!("token grid {:?}", adapted.dim());
    println!("at init:        max |adapted - base| = {:.3e}", max_diff(&adapted, &base));

    let up = encoder.params_mut().get_mut("encoder.adapters.0.up.weight").expect("adapter 0 exists");
    up.value_mut().mapv_inplace(|_| rng.random_range(-0.05..0.05));
    let nudged = encoder.encode(&images)?;
    println!("after a nudge:  max |adapted - base| = {:.3e}", max_diff(&nudged, &base));

    let trainable: usize = encoder.trainable_parameters().iter().map(|(_, p)| p.value.len()).sum();
    let frozen: usize = encoder.base_parameters().iter().map(|(_, p)| p.value.len()).sum();
    println!("{} adapters, {trainable} trainable vs {frozen} frozen values", encoder.adapter_count());
    Ok(())
}
