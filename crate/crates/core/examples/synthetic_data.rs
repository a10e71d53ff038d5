//! Writes a synthetic image/mask dataset and reads it back through the
//! training pipeline: indexing, preprocessing with flips, and batching.
//!
//! ```text
//! cargo run --release --example synthetic_data -- [out_dir] [count]
//! ```

use sam3unet::data::{epoch_batches, index_dataset, make_synthetic, DataConfig, EpochLoader, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let root = args.next().map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("sam3unet-synthetic"));
    let count: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(6);

    let summary = make_synthetic(&root, &SyntheticConfig::new(count, 84, 0))?;
    for (id, area) in summary.ids.iter().zip(&summary.areas) {
        println!("{id}: foreground {:.1}%", 100.0 * area);
    }

    let cfg = DataConfig { root: root.clone(), input_size: (84, 84), strict: true, ..DataConfig::default() };
    let pairs = index_dataset(&cfg)?.pairs;
    println!("\nepoch 0 batches {:?}", epoch_batches(pairs.len(), 4, cfg.seed, 0));
    for batch in EpochLoader::spawn(pairs, cfg, 4, 0, 2) {
        let batch = batch?;
        println!("batch {:?}: images {:?}, masks {:?}", batch.ids, batch.images.dim(), batch.masks.dim());
    }
    println!("dataset written to {}", root.display());
    Ok(())
}
