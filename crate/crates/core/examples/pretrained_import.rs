//! Imports backbone weights from a safetensors file through the bundled
//! key map. With no file argument a stand-in checkpoint is written from a
//! second toy encoder, using the release naming and a smaller positional
//! grid, so the rename and resampling paths both run.
//!
//! ```text
//! cargo run --release --example pretrained_import -- [weights.safetensors [dim depth heads mlp]]
//! ```

use sam3unet::encoder::{build_encoder, EncoderConfig, KeyMap, LoadOptions};
use sam3unet::tensor_file::TensorFile;

const TRUNK: &str = "detector.backbone.vision_backbone.trunk";

fn release_name(internal: &str) -> String {
    let rest = internal.strip_prefix("encoder.").unwrap_or(internal);
    match rest {
        "patch_embed.weight" => format!("{TRUNK}.patch_embed.proj.weight"),
        "patch_embed.bias" => format!("{TRUNK}.patch_embed.proj.bias"),
        "norm.weight" => format!("{TRUNK}.ln_post.weight"),
        "norm.bias" => format!("{TRUNK}.ln_post.bias"),
        other => format!("{TRUNK}.{other}"),
    }
}

fn stand_in(path: &std::path::Path) -> Result<(), Box<dyn std::error::Error>> {
    let donor = build_encoder(&EncoderConfig { img_size: (56, 56), ..EncoderConfig::toy() }, 42)?;
    let mut file = TensorFile::new();
    for (name, p) in donor.base_parameters() {
        file.tensors.insert(release_name(name), p.value.as_ref().clone());
    }
    file.tensors.insert("detector.transformer.decoder.query_embed".into(), ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 2])));
    file.write(path)?;
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = tempfile::tempdir()?;
    let (path, cfg) = match args.first() {
        Some(p) => {
            let mut cfg = EncoderConfig::sam3();
            if let [_, d, depth, heads, mlp] = args.as_slice() {
                cfg = EncoderConfig { embed_dim: d.parse()?, depth: depth.parse()?, num_heads: heads.parse()?, mlp_dim: mlp.parse()?, ..cfg };
            }
            (std::path::PathBuf::from(p), cfg)
        }
        None => {
            let p = dir.path().join("stand_in.safetensors");
            stand_in(&p)?;
            (p, EncoderConfig::toy())
        }
    };

    let mut encoder = build_encoder(&cfg, 0)?;
    let opts = LoadOptions { strict: false, key_map: Some(KeyMap::sam3()) };
    let report = encoder.load_pretrained(&path, &opts)?;
    println!("loaded     {}", report.loaded.len());
    println!("resized    {:?}", report.resized);
    println!("missing    {:?}", report.missing);
    println!("unexpected {:?}", report.unexpected);
    println!("ignored    {}", report.ignored);
    Ok(())
}
