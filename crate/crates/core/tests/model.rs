mod common;

use common::*;
use ndarray::{Array3, Array4};
use rand::Rng;
use sam3unet::decoder::{Decoder, LightweightBlock, LightweightBlockConfig};
use sam3unet::encoder::{build_encoder, EncoderConfig, KeyMap, LoadOptions};
use sam3unet::model::{ParameterCensus, Sam3UNet};
use sam3unet::nn::{Ctx, NormMode};
use sam3unet::params::{ParamStore, Role};
use sam3unet::pyramid::{level_sizes, Pyramid};
use sam3unet::tensor_file::TensorFile;
use sam3unet::Error;
use sam3unet_tensor::{gelu_scalar, Graph};

fn random4(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut r = rng(seed);
    Array4::from_shape_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn run_block(block: &LightweightBlock, store: &ParamStore, x: &Array4<f64>) -> Array4<f64> {
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, NormMode::Running);
    let y = block.forward(&ctx, store, ctx.input(x.clone().into_dyn())).unwrap();
    y.value().as_ref().clone().into_dimensionality().unwrap()
}

#[test]
fn adapters_are_identity_at_init() {
    let enc = build_encoder(&EncoderConfig::toy(), 3).unwrap();
    let x = random4(1, (1, 3, 84, 84));
    assert_eq!(enc.encode(&x).unwrap(), enc.encode_base_only(&x).unwrap());
    let mut r = rng(2);
    let tokens = Array3::from_shape_fn((2, 5, 64), |_| r.random_range(-3.0..3.0));
    assert_eq!(enc.adapter_forward(1, &tokens).unwrap(), tokens);
    assert!(matches!(enc.adapter_forward(2, &tokens), Err(Error::Shape(_))));
}

#[test]
fn encoder_grid_follows_input_size() {
    let enc = build_encoder(&EncoderConfig::toy(), 0).unwrap();
    assert_eq!(enc.encode(&random4(0, (2, 3, 56, 112))).unwrap().dim(), (2, 64, 4, 8));
    assert!(matches!(enc.encode(&random4(0, (1, 3, 50, 56))), Err(Error::Shape(_))));
}

#[test]
fn pyramid_levels_use_floor_sizes() {
    assert_eq!(level_sizes((336, 336)), [(84, 84), (42, 42), (21, 21), (10, 10)]);
    let pyramid = Pyramid::new(64, 0);
    let levels = pyramid.project(&random4(3, (1, 64, 6, 6)), (84, 84)).unwrap();
    let dims: Vec<_> = levels.iter().map(|l| l.dim()).collect();
    assert_eq!(dims, vec![(1, 128, 21, 21), (1, 128, 10, 10), (1, 128, 5, 5), (1, 128, 2, 2)]);
}

#[test]
fn toy_model_output_shapes() {
    let model = Sam3UNet::new(&EncoderConfig::toy(), 0).unwrap();
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, NormMode::Running);
    let out = model.forward(&ctx, ctx.input(random4(5, (2, 3, 84, 84)).into_dyn())).unwrap();
    for l in out.decoder.logits {
        assert_eq!(l.shape(), [2, 1, 84, 84]);
    }
    let stages: Vec<_> = out.decoder.stage_features.iter().map(|s| s.shape()).collect();
    assert_eq!(stages, vec![vec![2, 128, 5, 5], vec![2, 128, 10, 10], vec![2, 128, 21, 21]]);
    let p = model.predict(&random4(5, (2, 3, 84, 84))).unwrap();
    assert_eq!(p.dim(), (2, 1, 84, 84));
    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn block_widths_for_several_channel_counts() {
    for c in [8, 16, 64, 128, 256] {
        let w = LightweightBlockConfig::new(c, 32).unwrap().widths();
        assert_eq!((w.reduced, w.branch, w.concat, w.out), (c / 4, c / 8, c / 2, 32));
    }
    assert!(matches!(LightweightBlockConfig::new(12, 4), Err(Error::Config { .. })));
    assert!(matches!(LightweightBlockConfig::new(16, 0), Err(Error::Config { .. })));
}

#[test]
fn zero_weights_give_gelu_of_bias() {
    let block = LightweightBlock::new("b", LightweightBlockConfig::new(16, 6).unwrap());
    let mut store = ParamStore::materialize(&block.specs(), &mut rng(1));
    for (name, p) in store.iter_mut() {
        if name.ends_with("conv.weight") {
            p.value_mut().fill(0.0);
        }
    }
    let y = run_block(&block, &store, &random4(2, (1, 16, 4, 5)));
    let bias = store.value("b.expand.conv.bias").clone();
    for ((_, c, _, _), v) in y.indexed_iter() {
        let expected = gelu_scalar(bias[[c]] / (1.0f64 + 1e-5).sqrt());
        assert!((v - expected).abs() < 1e-15);
    }
}

#[test]
fn block_matches_scalar_loops() {
    for (c, out, seed) in [(8, 8, 0), (16, 8, 1), (32, 5, 2)] {
        let block = LightweightBlock::new("blk", LightweightBlockConfig::new(c, out).unwrap());
        let mut r = rng(seed);
        let mut store = ParamStore::materialize(&block.specs(), &mut r);
        randomize_bn(&mut store, &mut r);
        let x = random4(seed + 10, (2, c, 5, 7));
        let got = run_block(&block, &store, &x);
        let want = block_reference(&store, "blk", &x);
        let diff = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-5, "C={c}: {diff:e}");
    }
}

#[test]
fn block_rejects_wrong_channel_count() {
    let block = LightweightBlock::new("b", LightweightBlockConfig::new(16, 8).unwrap());
    let store = ParamStore::materialize(&block.specs(), &mut rng(0));
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, NormMode::Running);
    let x = ctx.input(random4(0, (1, 8, 3, 3)).into_dyn());
    assert!(matches!(block.forward(&ctx, &store, x), Err(Error::Shape(_))));
}

#[test]
fn decoder_parameter_names() {
    let d = Decoder::with_channels(8, 0).unwrap();
    let names: Vec<&str> = d.params().names().collect();
    for prefix in ["decoder.stem", "decoder.fuse3", "decoder.fuse2", "decoder.fuse1"] {
        for part in ["reduce", "dw1", "dw2", "expand"] {
            assert!(names.contains(&format!("{prefix}.{part}.conv.weight").as_str()));
            assert!(names.contains(&format!("{prefix}.{part}.bn.running_var").as_str()));
        }
    }
    assert!(names.contains(&"decoder.head1.weight"));
    assert_eq!(d.fusion_block().config(), LightweightBlockConfig::new(16, 8).unwrap());
}

#[test]
fn census_matches_materialized_toy_model() {
    let cfg = EncoderConfig::toy();
    let model = Sam3UNet::new(&cfg, 0).unwrap();
    let census = ParameterCensus::for_config(&cfg).unwrap();
    assert_eq!(census, model.census().unwrap());
    let count = |role: Role| model.named_parameters().iter().filter(|(_, p)| p.role == role).map(|(_, p)| p.value.len()).sum::<usize>();
    assert_eq!(census.base, count(Role::Frozen));
    assert_eq!(census.trainable(), count(Role::Trainable));
    assert_eq!(census.buffers, count(Role::Buffer));
    let adapters: usize = model.encoder().trainable_parameters().iter().map(|(_, p)| p.value.len()).sum();
    assert_eq!(census.adapters, adapters);
}

#[test]
fn full_scale_census() {
    let census = ParameterCensus::for_config(&EncoderConfig::sam3()).unwrap();
    assert_eq!(census.base, 446_237_696);
    assert_eq!(census.adapters, 2_130_944);
    assert_eq!(census.pyramid, 524_800);
    assert!(census.trainable_fraction() < 0.05);
    let mem = census.memory(4);
    assert_eq!(mem.optimizer_state, 2 * mem.trainable_weights);
    assert!(mem.trainable_state() < mem.frozen_weights / 10);
}

/// Base weights of a donor encoder under the release checkpoint's names.
fn donor_file(cfg: &EncoderConfig, seed: u64) -> (TensorFile, sam3unet::encoder::AdaptedEncoder) {
    let donor = build_encoder(cfg, seed).unwrap();
    let mut file = TensorFile::new();
    let trunk = "detector.backbone.vision_backbone.trunk";
    for (name, p) in donor.base_parameters() {
        let rest = name.strip_prefix("encoder.").unwrap();
        let key = match rest {
            "patch_embed.weight" | "patch_embed.bias" => format!("{trunk}.patch_embed.proj.{}", &rest[12..]),
            "norm.weight" => format!("{trunk}.ln_post.weight"),
            "norm.bias" => format!("{trunk}.ln_post.bias"),
            other => format!("{trunk}.{other}"),
        };
        file.tensors.insert(key, p.value.as_ref().clone());
    }
    file.tensors.insert(format!("{trunk}.rope.freqs"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[4])));
    (file, donor)
}

#[test]
fn pretrained_import_through_key_map() {
    let cfg = EncoderConfig::toy();
    let (file, donor) = donor_file(&cfg, 99);
    let mut enc = build_encoder(&cfg, 1).unwrap();
    let adapters_before: Vec<_> = enc.trainable_parameters().iter().map(|(_, p)| p.value.clone()).collect();
    let opts = LoadOptions { strict: true, key_map: Some(KeyMap::sam3()) };
    let report = enc.load_tensors(&file, &opts).unwrap();
    assert_eq!(report.loaded.len(), donor.base_parameters().len());
    assert!(report.missing.is_empty() && report.unexpected.is_empty());
    assert_eq!(report.ignored, 1);
    for (name, p) in donor.base_parameters() {
        assert_eq!(enc.params().value(name), &p.value, "{name}");
    }
    let adapters_after: Vec<_> = enc.trainable_parameters().iter().map(|(_, p)| p.value.clone()).collect();
    assert_eq!(adapters_before, adapters_after);

    // Through a file on disk as well.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.safetensors");
    file.write(&path).unwrap();
    let mut again = build_encoder(&cfg, 2).unwrap();
    again.load_pretrained(&path, &opts).unwrap();
    assert_eq!(again.encode_base_only(&random4(0, (1, 3, 84, 84))).unwrap(), donor.encode_base_only(&random4(0, (1, 3, 84, 84))).unwrap());
}

#[test]
fn pretrained_import_resizes_positional_grid() {
    let small = EncoderConfig { img_size: (56, 56), ..EncoderConfig::toy() };
    let (file, _) = donor_file(&small, 5);
    let mut enc = build_encoder(&EncoderConfig::toy(), 1).unwrap();
    let opts = LoadOptions { strict: true, key_map: Some(KeyMap::sam3()) };
    let report = enc.load_tensors(&file, &opts).unwrap();
    assert_eq!(report.resized, vec!["encoder.pos_embed".to_string()]);
    assert_eq!(enc.params().value("encoder.pos_embed").shape(), &[1, 36, 64]);
}

#[test]
fn strict_import_reports_missing_tensors() {
    let cfg = EncoderConfig::toy();
    let (mut file, _) = donor_file(&cfg, 5);
    file.tensors.retain(|k, _| !k.ends_with("blocks.1.mlp.fc2.bias"));
    let mut enc = build_encoder(&cfg, 1).unwrap();
    let strict = LoadOptions { strict: true, key_map: Some(KeyMap::sam3()) };
    assert!(matches!(enc.load_tensors(&file, &strict), Err(Error::Load { .. })));
    let lenient = LoadOptions { strict: false, key_map: Some(KeyMap::sam3()) };
    let report = enc.load_tensors(&file, &lenient).unwrap();
    assert_eq!(report.missing, vec!["encoder.blocks.1.mlp.fc2.bias".to_string()]);
}
