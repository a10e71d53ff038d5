use std::collections::BTreeMap;
use std::path::Path;

use sam3unet::data::{index_dataset, make_synthetic, DataConfig, SamplePair, SyntheticConfig};
use sam3unet::encoder::EncoderConfig;
use sam3unet::losses::LossConfig;
use sam3unet::model::Sam3UNet;
use sam3unet::tensor_file::TensorFile;
use sam3unet::trainer::*;
use sam3unet::Error;
use sam3unet_tensor::Array;

fn setup(dir: &Path) -> (DataConfig, Vec<SamplePair>) {
    make_synthetic(&dir.join("data"), &SyntheticConfig::new(3, 56, 1)).unwrap();
    let data = DataConfig { root: dir.join("data"), input_size: (56, 56), ..DataConfig::default() };
    let pairs = index_dataset(&data).unwrap().pairs;
    (data, pairs)
}

fn cfg(dir: &Path, epochs: usize) -> TrainConfig {
    TrainConfig { lr: 3e-3, epochs, batch_size: 2, seed: 5, checkpoint_dir: dir.to_path_buf(), ..TrainConfig::default() }
}

#[test]
fn cosine_schedule_endpoints() {
    let c = TrainConfig { lr: 1e-3, lr_floor: 1e-5, ..TrainConfig::default() };
    assert_eq!(lr_at(0, 100, &c), 1e-3);
    assert!((lr_at(100, 100, &c) - 1e-5).abs() < 1e-18);
    assert!((lr_at(50, 100, &c) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
}

#[test]
fn adamw_first_step_matches_closed_form() {
    let mut model = Sam3UNet::new(&EncoderConfig::toy(), 0).unwrap();
    let mut opt = AdamW::new(&model).unwrap();
    let name = "decoder.head1.bias";
    let p0 = model.param(name).unwrap().value[[0]];
    let grads = BTreeMap::from([(name.to_string(), Array::from_elem(ndarray::IxDyn(&[1]), 0.25))]);
    let (lr, wd) = (1e-2, 0.1);
    opt.update(&mut model, &grads, lr, wd);
    let expected = p0 * (1.0 - lr * wd) - lr * 0.25 / (0.25 + ADAM_EPS);
    assert!((model.param(name).unwrap().value[[0]] - expected).abs() < 1e-15);
    assert_eq!(opt.step, 1);
    assert!(opt.names().all(|n| !n.starts_with("encoder.blocks")));
}

#[test]
fn history_csv_round_trip() {
    let h = vec![StepRecord { step: 0, lr: 1e-3, loss: 0.123456789 }, StepRecord { step: 1, lr: 9.9e-4, loss: 1.0 / 3.0 }];
    assert_eq!(parse_history_csv(&history_csv(&h)).unwrap(), h);
    assert!(matches!(parse_history_csv("a,b\n"), Err(Error::Parse { .. })));
}

#[test]
fn checkpoint_round_trip_restores_everything() {
    let dir = tempfile::tempdir().unwrap();
    let (data, pairs) = setup(dir.path());
    let mut model = Sam3UNet::new(&EncoderConfig::toy(), 2).unwrap();
    let run = dir.path().join("run");
    let outcome = train(&mut model, &pairs, &data, &cfg(&run, 2), &LossConfig::default(), TrainOptions {
        config_text: "# snapshot\n".into(),
        ..TrainOptions::default()
    })
    .unwrap();
    assert_eq!(outcome.history.len(), 4);
    assert_eq!(outcome.last_checkpoint, last_checkpoint_path(&run));

    let ck = load_checkpoint(&outcome.last_checkpoint).unwrap();
    assert_eq!(ck.epoch, 2);
    assert_eq!(ck.seed, 5);
    assert_eq!(ck.config_text, "# snapshot\n");
    assert_eq!(ck.history, outcome.history);
    assert_eq!(ck.optimizer.step, 4);
    assert_eq!(parse_history_csv(&std::fs::read_to_string(run.join("loss.csv")).unwrap()).unwrap(), outcome.history);

    let mut fresh = Sam3UNet::new(&EncoderConfig::toy(), 77).unwrap();
    ck.restore_into(&mut fresh).unwrap();
    for ((a, pa), (b, pb)) in model.named_parameters().iter().zip(fresh.named_parameters()) {
        assert_eq!(*a, b);
        assert_eq!(pa.value, pb.value, "{a}");
    }
    let again = Checkpoint::from_file(ck.to_file()).unwrap();
    assert_eq!(again.optimizer, ck.optimizer);
}

#[test]
fn unknown_checkpoint_version_is_rejected() {
    let model = Sam3UNet::new(&EncoderConfig::toy(), 0).unwrap();
    let opt = AdamW::new(&model).unwrap();
    let mut file = Checkpoint::capture(&model, &opt, 1, 0, "", &[]).to_file();
    file.metadata.insert("format_version".into(), "2".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    file.write(&path).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Version { ref found, expected: 1 }) if found == "2"));

    let mut stray = TensorFile::new();
    stray.metadata = file.metadata.clone();
    stray.metadata.insert("format_version".into(), "1".into());
    stray.tensors.insert("weights/x".into(), Array::zeros(ndarray::IxDyn(&[1])));
    assert!(matches!(Checkpoint::from_file(stray), Err(Error::Parse { .. })));
}

#[test]
fn resuming_at_epoch_three_of_five_runs_two_more() {
    let dir = tempfile::tempdir().unwrap();
    let (data, pairs) = setup(dir.path());
    let loss = LossConfig::default();

    let straight_dir = dir.path().join("straight");
    let mut straight = Sam3UNet::new(&EncoderConfig::toy(), 3).unwrap();
    let full = train(&mut straight, &pairs, &data, &cfg(&straight_dir, 5), &loss, TrainOptions::default()).unwrap();
    assert_eq!(full.epochs_run, 5);
    for e in 1..=5 {
        assert!(checkpoint_path(&straight_dir, e).is_file());
    }

    let resumed_dir = dir.path().join("resumed");
    let ck = load_checkpoint(&checkpoint_path(&straight_dir, 3)).unwrap();
    let mut resumed = Sam3UNet::new(&EncoderConfig::toy(), 3).unwrap();
    let opts = TrainOptions { resume: Some(ck), ..TrainOptions::default() };
    let rest = train(&mut resumed, &pairs, &data, &cfg(&resumed_dir, 5), &loss, opts).unwrap();
    assert_eq!(rest.epochs_run, 2);
    assert_eq!(rest.history, full.history);
    assert!(!checkpoint_path(&resumed_dir, 3).exists());
    assert!(checkpoint_path(&resumed_dir, 5).is_file());
    assert_eq!(
        std::fs::read(straight_dir.join("loss.csv")).unwrap(),
        std::fs::read(resumed_dir.join("loss.csv")).unwrap()
    );
}

#[test]
fn sparse_checkpointing_keeps_the_final_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let (data, pairs) = setup(dir.path());
    let run = dir.path().join("run");
    let mut model = Sam3UNet::new(&EncoderConfig::toy(), 0).unwrap();
    let c = TrainConfig { checkpoint_every: 2, eval_every: 3, ..cfg(&run, 3) };
    let opts = TrainOptions { eval_pairs: Some(&pairs), ..TrainOptions::default() };
    let out = train(&mut model, &pairs, &data, &c, &LossConfig::default(), opts).unwrap();
    let exists: Vec<bool> = (1..=3).map(|e| checkpoint_path(&run, e).exists()).collect();
    assert_eq!(exists, [false, true, true]);
    assert_eq!(out.evaluations.len(), 1);
    assert_eq!(out.evaluations[0].1.count, 3);
}

#[test]
fn invalid_training_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (data, pairs) = setup(dir.path());
    let mut model = Sam3UNet::new(&EncoderConfig::toy(), 0).unwrap();
    let bad = TrainConfig { batch_size: 0, ..cfg(dir.path(), 1) };
    assert!(matches!(train(&mut model, &pairs, &data, &bad, &LossConfig::default(), TrainOptions::default()), Err(Error::Config { .. })));
    assert!(matches!(train(&mut model, &[], &data, &cfg(dir.path(), 1), &LossConfig::default(), TrainOptions::default()), Err(Error::Validation(_))));
}

#[test]
fn prediction_is_written_at_original_size() {
    let dir = tempfile::tempdir().unwrap();
    let (data, pairs) = setup(dir.path());
    let model = Sam3UNet::new(&EncoderConfig::toy(), 0).unwrap();
    let img = image::RgbImage::from_pixel(70, 40, image::Rgb([10, 200, 30]));
    let path = dir.path().join("odd.png");
    img.save(&path).unwrap();
    let out = dir.path().join("out/odd.png");
    let p = predict(&model, &data, &path, &out).unwrap();
    assert_eq!(p.dim(), (40, 70));
    let written = image::open(&out).unwrap().to_luma8();
    assert_eq!(written.dimensions(), (70, 40));
    assert_eq!(written.get_pixel(3, 3)[0], to_gray_image(&p).get_pixel(3, 3)[0]);
    assert_eq!(evaluate_pairs(&model, &pairs, &data, &Default::default()).unwrap().count, 3);
}
