//! Trains for five epochs, then replays the last two from the epoch-3
//! checkpoint and checks the loss history matches step for step.
//!
//! ```text
//! cargo run --release --example resume_training
//! ```

use sam3unet::data::{index_dataset, make_synthetic, DataConfig, SyntheticConfig};
use sam3unet::encoder::EncoderConfig;
use sam3unet::losses::LossConfig;
use sam3unet::model::Sam3UNet;
use sam3unet::trainer::{checkpoint_path, load_checkpoint, train, TrainConfig, TrainOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    make_synthetic(&dir.path().join("data"), &SyntheticConfig::new(4, 56, 0))?;
    let data = DataConfig { root: dir.path().join("data"), input_size: (56, 56), ..DataConfig::default() };
    let pairs = index_dataset(&data)?.pairs;
    let cfg = |run: &str| TrainConfig { lr: 5e-3, epochs: 5, batch_size: 2, checkpoint_dir: dir.path().join(run), ..TrainConfig::default() };

    let mut model = Sam3UNet::new(&EncoderConfig::toy(), 0)?;
    let full = train(&mut model, &pairs, &data, &cfg("full"), &LossConfig::default(), TrainOptions::default())?;

    let ck = load_checkpoint(&checkpoint_path(&dir.path().join("full"), 3))?;
    println!("checkpoint: epoch {}, optimizer step {}, {} recorded steps", ck.epoch, ck.optimizer.step, ck.history.len());
    let mut resumed = Sam3UNet::new(&EncoderConfig::toy(), 0)?;
    let opts = TrainOptions { resume: Some(ck), ..TrainOptions::default() };
    let rest = train(&mut resumed, &pairs, &data, &cfg("resumed"), &LossConfig::default(), opts)?;

    println!("resumed run trained {} more epochs", rest.epochs_run);
    for (a, b) in full.history.iter().zip(&rest.history) {
        println!("step {:>2}  straight {:.6}  resumed {:.6}", a.step, a.loss, b.loss);
    }
    println!("histories identical: {}", full.history == rest.history);
    Ok(())
}
