//! Frozen plain ViT with a trainable bottleneck adapter in front of every
//! transformer block.
//!
//! Token flow: `patchify + pos_embed → [adapter_i → block_i] × depth → norm`,
//! reshaped to a `(B, D, H/p, W/p)` grid. Blocks are pre-norm
//! (`x + attn(ln1(x))`, `x + mlp(ln2(x))`). Adapters are residual,
//! `x + gelu(up(gelu(down(x))))`, with a zero-initialized up projection so a
//! freshly built encoder reproduces the base network exactly.

mod pretrained;

use std::path::PathBuf;

use ndarray::{Array3, Array4, ArrayD, Ix3, Ix4, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sam3unet_tensor::{bicubic_plane, Graph, Var};

use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, NormMode};
use crate::params::{Init, Param, ParamSpec, ParamStore, Role};

pub use pretrained::{KeyMap, LoadOptions, LoadReport};

pub const PREFIX: &str = "encoder";

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// Hidden width of each block's MLP.
    pub mlp_dim: usize,
    /// Native input size `(h, w)`; the positional grid is `img_size / patch_size`.
    pub img_size: (usize, usize),
    pub adapter_bottleneck: usize,
    pub pretrained_path: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::sam3()
    }
}

impl EncoderConfig {
    /// Image-encoder geometry of SAM3 (ViT between L and H, 446M parameters)
    /// at a 336×336 training resolution with 32-channel adapters.
    pub fn sam3() -> Self {
        EncoderConfig {
            patch_size: 14,
            embed_dim: 1024,
            depth: 32,
            num_heads: 16,
            mlp_dim: 4736,
            img_size: (336, 336),
            adapter_bottleneck: 32,
            pretrained_path: None,
        }
    }

    /// Desk-scale encoder used by tests and examples.
    pub fn toy() -> Self {
        EncoderConfig {
            patch_size: 14,
            embed_dim: 64,
            depth: 2,
            num_heads: 4,
            mlp_dim: 256,
            img_size: (84, 84),
            adapter_bottleneck: 8,
            pretrained_path: None,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.img_size.0 / self.patch_size, self.img_size.1 / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("encoder.{f}");
        if self.patch_size == 0 {
            return Err(Error::config(field("patch_size"), "must be positive"));
        }
        let (h, w) = self.img_size;
        if h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::config(
                field("img_size"),
                format!("{h}x{w} is not a positive multiple of patch size {}", self.patch_size),
            ));
        }
        if self.depth == 0 {
            return Err(Error::config(field("depth"), "must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config(field("embed_dim"), "must be positive"));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(
                field("num_heads"),
                format!("{} heads do not divide embed_dim {}", self.num_heads, self.embed_dim),
            ));
        }
        if self.mlp_dim == 0 {
            return Err(Error::config(field("mlp_dim"), "must be positive"));
        }
        if self.adapter_bottleneck == 0 || self.adapter_bottleneck > self.embed_dim {
            return Err(Error::config(
                field("adapter_bottleneck"),
                format!("{} is outside 1..={}", self.adapter_bottleneck, self.embed_dim),
            ));
        }
        Ok(())
    }
}

/// Residual bottleneck adapter: `x + gelu(up(gelu(down(x))))`.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    fn new(prefix: &str, dim: usize, bottleneck: usize) -> Self {
        Adapter {
            down: Linear::new(format!("{prefix}.down"), dim, bottleneck, Role::Trainable),
            up: Linear::new(format!("{prefix}.up"), bottleneck, dim, Role::Trainable).zero_init(),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.down.specs();
        specs.extend(self.up.specs());
        specs
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, store: &'g ParamStore, x: Var<'g>) -> Var<'g> {
        let h = self.down.forward(ctx, store, x).gelu();
        let h = self.up.forward(ctx, store, h).gelu();
        x.add(h)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(prefix: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.embed_dim;
        Block {
            norm1: LayerNorm::new(format!("{prefix}.norm1"), d, Role::Frozen),
            qkv: Linear::new(format!("{prefix}.attn.qkv"), d, 3 * d, Role::Frozen),
            proj: Linear::new(format!("{prefix}.attn.proj"), d, d, Role::Frozen),
            norm2: LayerNorm::new(format!("{prefix}.norm2"), d, Role::Frozen),
            fc1: Linear::new(format!("{prefix}.mlp.fc1"), d, cfg.mlp_dim, Role::Frozen),
            fc2: Linear::new(format!("{prefix}.mlp.fc2"), cfg.mlp_dim, d, Role::Frozen),
            heads: cfg.num_heads,
        }
    }

    fn specs(&self) -> Vec<ParamSpec> {
        [&self.norm1.specs(), &self.qkv.specs(), &self.proj.specs(), &self.norm2.specs(), &self.fc1.specs(), &self.fc2.specs()]
            .into_iter()
            .flatten()
            .cloned()
            .collect()
    }

    fn attention<'g>(&self, ctx: &Ctx<'g>, store: &'g ParamStore, x: Var<'g>) -> Var<'g> {
        let (b, n, d) = (x.dim(0), x.dim(1), x.dim(2));
        let dh = d / self.heads;
        let qkv = self.qkv.forward(ctx, store, x).chunk(3, 2);
        let split = |t: Var<'g>| t.reshape(&[b, n, self.heads, dh]).permute(&[0, 2, 1, 3]);
        let (q, k, v) = (split(qkv[0]), split(qkv[1]), split(qkv[2]));
        let attn = q.matmul(k.transpose_last()).mul_scalar(1.0 / (dh as f64).sqrt()).softmax_last();
        let out = attn.matmul(v).permute(&[0, 2, 1, 3]).reshape(&[b, n, d]);
        self.proj.forward(ctx, store, out)
    }

    fn forward<'g>(&self, ctx: &Ctx<'g>, store: &'g ParamStore, x: Var<'g>) -> Var<'g> {
        let x = x.add(self.attention(ctx, store, self.norm1.forward(ctx, store, x)));
        let h = self.fc1.forward(ctx, store, self.norm2.forward(ctx, store, x)).gelu();
        x.add(self.fc2.forward(ctx, store, h))
    }
}

/// Parameter layout of an adapted encoder, independent of any storage.
#[derive(Debug, Clone)]
pub struct EncoderLayout {
    config: EncoderConfig,
    blocks: Vec<Block>,
    adapters: Vec<Adapter>,
    norm: LayerNorm,
}

impl EncoderLayout {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.depth).map(|i| Block::new(&format!("{PREFIX}.blocks.{i}"), config)).collect();
        let adapters = (0..config.depth)
            .map(|i| Adapter::new(&format!("{PREFIX}.adapters.{i}"), config.embed_dim, config.adapter_bottleneck))
            .collect();
        Ok(EncoderLayout {
            config: config.clone(),
            blocks,
            adapters,
            norm: LayerNorm::new(format!("{PREFIX}.norm"), config.embed_dim, Role::Frozen),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Frozen backbone parameters.
    pub fn base_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let (gh, gw) = c.grid();
        let p = c.patch_size;
        let fan_in = 3 * p * p;
        let mut specs = vec![
            ParamSpec::new(
                format!("{PREFIX}.patch_embed.weight"),
                &[c.embed_dim, 3, p, p],
                Init::kaiming_uniform(fan_in),
                Role::Frozen,
            ),
            ParamSpec::new(format!("{PREFIX}.patch_embed.bias"), &[c.embed_dim], Init::kaiming_uniform(fan_in), Role::Frozen),
            ParamSpec::new(format!("{PREFIX}.pos_embed"), &[1, gh * gw, c.embed_dim], Init::TruncNormal(0.02), Role::Frozen),
        ];
        for block in &self.blocks {
            specs.extend(block.specs());
        }
        specs.extend(self.norm.specs());
        specs
    }

    pub fn adapter_specs(&self) -> Vec<ParamSpec> {
        self.adapters.iter().flat_map(Adapter::specs).collect()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.base_specs();
        specs.extend(self.adapter_specs());
        specs
    }
}

/// The encoder with its weights.
#[derive(Debug, Clone)]
pub struct AdaptedEncoder {
    layout: EncoderLayout,
    params: ParamStore,
}

/// Builds an encoder with randomly initialized weights (zero adapter
/// up-projections). Loads `config.pretrained_path` when set.
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<AdaptedEncoder> {
    let layout = EncoderLayout::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParamStore::materialize(&layout.specs(), &mut rng);
    let mut encoder = AdaptedEncoder { layout, params };
    if let Some(path) = config.pretrained_path.clone() {
        encoder.load_pretrained(&path, &LoadOptions::default())?;
    }
    Ok(encoder)
}

fn resize_pos_embed(pos: &ArrayD<f64>, from: (usize, usize), to: (usize, usize)) -> ArrayD<f64> {
    let d = pos.shape()[2];
    let mut out = ArrayD::zeros(IxDyn(&[1, to.0 * to.1, d]));
    for ch in 0..d {
        let plane: Vec<f64> = (0..from.0 * from.1).map(|t| pos[[0, t, ch]]).collect();
        let resized = bicubic_plane(&plane, from.0, from.1, to.0, to.1);
        for (t, v) in resized.into_iter().enumerate() {
            out[[0, t, ch]] = v;
        }
    }
    out
}

impl AdaptedEncoder {
    pub fn from_parts(layout: EncoderLayout, params: ParamStore) -> Self {
        AdaptedEncoder { layout, params }
    }

    pub fn config(&self) -> &EncoderConfig {
        self.layout.config()
    }

    pub fn layout(&self) -> &EncoderLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn adapter_count(&self) -> usize {
        self.layout.adapters.len()
    }

    /// Exactly the adapter parameters, in name order.
    pub fn trainable_parameters(&self) -> Vec<(&str, &Param)> {
        self.params.iter().filter(|(_, p)| p.trainable()).collect()
    }

    pub fn base_parameters(&self) -> Vec<(&str, &Param)> {
        self.params.iter().filter(|(_, p)| p.role == Role::Frozen).collect()
    }

    fn check_images(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let p = self.config().patch_size;
        match shape {
            [_, 3, h, w] if *h > 0 && *w > 0 && h % p == 0 && w % p == 0 => Ok((h / p, w / p)),
            [_, 3, h, w] => Err(Error::Shape(format!("image size {h}x{w} is not a positive multiple of patch size {p}"))),
            other => Err(Error::Shape(format!("expected images (B, 3, H, W), got {other:?}"))),
        }
    }

    fn pos_embed<'g>(&'g self, ctx: &Ctx<'g>, grid: (usize, usize)) -> Var<'g> {
        let name = format!("{PREFIX}.pos_embed");
        let native = self.config().grid();
        if grid == native {
            ctx.param(&self.params, &name)
        } else {
            ctx.input(resize_pos_embed(self.params.value(&name), native, grid))
        }
    }

    /// Differentiable forward pass. `use_adapters = false` runs the bare
    /// backbone.
    pub fn forward<'g>(&'g self, ctx: &Ctx<'g>, images: Var<'g>, use_adapters: bool) -> Result<Var<'g>> {
        let (gh, gw) = self.check_images(&images.shape())?;
        let c = self.config();
        let store = &self.params;
        let w = ctx.param(store, &format!("{PREFIX}.patch_embed.weight"));
        let b = ctx.param(store, &format!("{PREFIX}.patch_embed.bias"));
        let mut tokens = images.patchify(w, Some(b), c.patch_size).add(self.pos_embed(ctx, (gh, gw)));
        for (block, adapter) in self.layout.blocks.iter().zip(&self.layout.adapters) {
            if use_adapters {
                tokens = adapter.forward(ctx, store, tokens);
            }
            tokens = block.forward(ctx, store, tokens);
        }
        let tokens = self.layout.norm.forward(ctx, store, tokens);
        let batch = tokens.dim(0);
        Ok(tokens.permute(&[0, 2, 1]).reshape(&[batch, c.embed_dim, gh, gw]))
    }

    fn run(&self, images: &Array4<f64>, use_adapters: bool) -> Result<Array4<f64>> {
        let graph = Graph::no_grad();
        let ctx = Ctx::new(&graph, NormMode::Running);
        let out = self.forward(&ctx, ctx.input(images.clone().into_dyn()), use_adapters)?;
        Ok(out.value().view().into_dimensionality::<Ix4>().expect("rank 4").to_owned())
    }

    /// Token grid `(B, D, H/p, W/p)` for a batch of normalized images.
    pub fn encode(&self, images: &Array4<f64>) -> Result<Array4<f64>> {
        self.run(images, true)
    }

    /// Same as [`encode`](Self::encode) with every adapter bypassed.
    pub fn encode_base_only(&self, images: &Array4<f64>) -> Result<Array4<f64>> {
        self.run(images, false)
    }

    /// Applies adapter `index` to a token batch `(B, N, D)`.
    pub fn adapter_forward(&self, index: usize, tokens: &Array3<f64>) -> Result<Array3<f64>> {
        let adapter = self
            .layout
            .adapters
            .get(index)
            .ok_or_else(|| Error::Shape(format!("adapter {index} out of range ({} blocks)", self.adapter_count())))?;
        let d = self.config().embed_dim;
        if tokens.shape()[2] != d {
            return Err(Error::Shape(format!("adapter expects last dimension {d}, got {}", tokens.shape()[2])));
        }
        let graph = Graph::no_grad();
        let ctx = Ctx::new(&graph, NormMode::Running);
        let out = adapter.forward(&ctx, &self.params, ctx.input(tokens.clone().into_dyn()));
        Ok(out.value().view().into_dimensionality::<Ix3>().unwrap().to_owned())
    }
}
