//! Lightweight U-Net decoder.
//!
//! The building block bottlenecks `C → C/4` with a 1×1 Conv-BN-GELU, splits
//! the result into two `C/8` halves, runs the second half through two
//! chained 3×3 depthwise Conv-BN-GELU units, concatenates all four `C/8`
//! parts (`C/2` channels) and expands with another 1×1 Conv-BN-GELU.
//!
//! Topology over a pyramid `f1..f4` (strides 4..32):
//!
//! ```text
//! d4 = block(f4)
//! d3 = block([up(d4 → f3), f3])      head3(d3)
//! d2 = block([up(d3 → f2), f2])      head2(d2)
//! d1 = block([up(d2 → f1), f1])      head1(d1)   ← inference output
//! ```
//!
//! Every head is a 1×1 convolution to one channel, bilinearly resized to the
//! input resolution. Logits are returned coarse to fine.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sam3unet_tensor::Var;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv1x1, Ctx, DepthwiseConv3x3};
use crate::params::{ParamSpec, ParamStore};
use crate::pyramid::{FeaturePyramid, PYRAMID_CHANNELS};

pub const PREFIX: &str = "decoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LightweightBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Channel widths inside one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockWidths {
    pub reduced: usize,
    pub branch: usize,
    pub concat: usize,
    pub out: usize,
}

impl LightweightBlockConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Result<Self> {
        if in_channels == 0 || in_channels % 8 != 0 {
            return Err(Error::config("in_channels", format!("{in_channels} is not a positive multiple of 8")));
        }
        if out_channels == 0 {
            return Err(Error::config("out_channels", "must be at least 1"));
        }
        Ok(LightweightBlockConfig { in_channels, out_channels })
    }

    pub fn widths(&self) -> BlockWidths {
        BlockWidths {
            reduced: self.in_channels / 4,
            branch: self.in_channels / 8,
            concat: 4 * (self.in_channels / 8),
            out: self.out_channels,
        }
    }
}

/// Shapes observed inside a block during one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockTrace {
    pub reduced: Vec<usize>,
    pub parts: [Vec<usize>; 4],
    pub concat: Vec<usize>,
    pub output: Vec<usize>,
}

#[derive(Debug, Clone)]
struct ConvBnGelu<C> {
    conv: C,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct LightweightBlock {
    cfg: LightweightBlockConfig,
    reduce: ConvBnGelu<Conv1x1>,
    dw1: ConvBnGelu<DepthwiseConv3x3>,
    dw2: ConvBnGelu<DepthwiseConv3x3>,
    expand: ConvBnGelu<Conv1x1>,
}

impl LightweightBlock {
    pub fn new(prefix: &str, cfg: LightweightBlockConfig) -> Self {
        let w = cfg.widths();
        LightweightBlock {
            cfg,
            reduce: ConvBnGelu {
                conv: Conv1x1::new(format!("{prefix}.reduce.conv"), cfg.in_channels, w.reduced),
                bn: BatchNorm2d::new(format!("{prefix}.reduce.bn"), w.reduced),
            },
            dw1: ConvBnGelu {
                conv: DepthwiseConv3x3::new(format!("{prefix}.dw1.conv"), w.branch),
                bn: BatchNorm2d::new(format!("{prefix}.dw1.bn"), w.branch),
            },
            dw2: ConvBnGelu {
                conv: DepthwiseConv3x3::new(format!("{prefix}.dw2.conv"), w.branch),
                bn: BatchNorm2d::new(format!("{prefix}.dw2.bn"), w.branch),
            },
            expand: ConvBnGelu {
                conv: Conv1x1::new(format!("{prefix}.expand.conv"), w.concat, w.out),
                bn: BatchNorm2d::new(format!("{prefix}.expand.bn"), w.out),
            },
        }
    }

    pub fn config(&self) -> LightweightBlockConfig {
        self.cfg
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        specs.extend(self.reduce.conv.specs());
        specs.extend(self.reduce.bn.specs());
        specs.extend(self.dw1.conv.specs());
        specs.extend(self.dw1.bn.specs());
        specs.extend(self.dw2.conv.specs());
        specs.extend(self.dw2.bn.specs());
        specs.extend(self.expand.conv.specs());
        specs.extend(self.expand.bn.specs());
        specs
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, store: &'g ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        self.forward_traced(ctx, store, x).map(|(y, _)| y)
    }

    pub fn forward_traced<'g>(&self, ctx: &Ctx<'g>, store: &'g ParamStore, x: Var<'g>) -> Result<(Var<'g>, BlockTrace)> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!("block expects (B, {}, h, w), got {shape:?}", self.cfg.in_channels)));
        }
        let p = self.reduce.bn.forward(ctx, store, self.reduce.conv.forward(ctx, store, x)).gelu();
        let halves = p.chunk(2, 1);
        let (p1, p2) = (halves[0], halves[1]);
        let p3 = self.dw1.bn.forward(ctx, store, self.dw1.conv.forward(ctx, store, p2)).gelu();
        let p4 = self.dw2.bn.forward(ctx, store, self.dw2.conv.forward(ctx, store, p3)).gelu();
        let cat = Var::concat(&[p1, p2, p3, p4], 1);
        let y = self.expand.bn.forward(ctx, store, self.expand.conv.forward(ctx, store, cat)).gelu();
        let trace = BlockTrace {
            reduced: p.shape(),
            parts: [p1.shape(), p2.shape(), p3.shape(), p4.shape()],
            concat: cat.shape(),
            output: y.shape(),
        };
        Ok((y, trace))
    }
}

/// Decoder outputs, coarse to fine.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput<'g> {
    /// Raw logits of the three heads `(B, 1, H, W)`, order `[d3, d2, d1]`.
    pub logits: [Var<'g>; 3],
    /// Fused maps `d3, d2, d1` at strides 16, 8, 4.
    pub stage_features: [Var<'g>; 3],
}

impl<'g> DecoderOutput<'g> {
    /// The stride-4 head used for inference.
    pub fn prediction(&self) -> Var<'g> {
        self.logits[2]
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    channels: usize,
    stem: LightweightBlock,
    fuse: [LightweightBlock; 3],
    heads: [Conv1x1; 3],
    params: ParamStore,
}

impl Decoder {
    fn layout(channels: usize) -> Result<(LightweightBlock, [LightweightBlock; 3], [Conv1x1; 3])> {
        let stem = LightweightBlock::new(&format!("{PREFIX}.stem"), LightweightBlockConfig::new(channels, channels)?);
        let fuse_cfg = LightweightBlockConfig::new(2 * channels, channels)?;
        // fuse[0] produces d3, fuse[2] produces d1.
        let fuse = [3, 2, 1].map(|k| LightweightBlock::new(&format!("{PREFIX}.fuse{k}"), fuse_cfg));
        let heads = [3, 2, 1].map(|k| Conv1x1::new(format!("{PREFIX}.head{k}"), channels, 1));
        Ok((stem, fuse, heads))
    }

    pub fn specs(channels: usize) -> Result<Vec<ParamSpec>> {
        let (stem, fuse, heads) = Self::layout(channels)?;
        let mut specs = stem.specs();
        specs.extend(fuse.iter().flat_map(LightweightBlock::specs));
        specs.extend(heads.iter().flat_map(Conv1x1::specs));
        Ok(specs)
    }

    /// Decoder over `channels`-wide pyramids (the model uses 128).
    pub fn with_channels(channels: usize, seed: u64) -> Result<Self> {
        let specs = Self::specs(channels)?;
        let params = ParamStore::materialize(&specs, &mut ChaCha8Rng::seed_from_u64(seed));
        Self::from_params(channels, params)
    }

    pub fn new(seed: u64) -> Self {
        Self::with_channels(PYRAMID_CHANNELS, seed).expect("128 channels form a valid decoder")
    }

    pub fn from_params(channels: usize, params: ParamStore) -> Result<Self> {
        let (stem, fuse, heads) = Self::layout(channels)?;
        Ok(Decoder { channels, stem, fuse, heads, params })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn fusion_block(&self) -> &LightweightBlock {
        &self.fuse[0]
    }

    pub fn forward<'g>(&'g self, ctx: &Ctx<'g>, pyramid: &FeaturePyramid<'g>) -> Result<DecoderOutput<'g>> {
        for (k, level) in pyramid.levels.iter().enumerate() {
            let shape = level.shape();
            if shape.len() != 4 || shape[1] != self.channels {
                return Err(Error::Shape(format!("pyramid level {} must have {} channels, got {shape:?}", k + 1, self.channels)));
            }
        }
        let store = &self.params;
        let [f1, f2, f3, f4] = pyramid.levels;
        let mut d = self.stem.forward(ctx, store, f4)?;
        let mut stages = Vec::with_capacity(3);
        for (block, skip) in self.fuse.iter().zip([f3, f2, f1]) {
            let up = upsample_to(d, (skip.dim(2), skip.dim(3)));
            d = block.forward(ctx, store, Var::concat(&[up, skip], 1))?;
            stages.push(d);
        }
        let (h, w) = pyramid.input_size;
        let logits: Vec<Var<'g>> =
            self.heads.iter().zip(&stages).map(|(head, &s)| head.forward(ctx, store, s).resize_bilinear(h, w)).collect();
        Ok(DecoderOutput { logits: [logits[0], logits[1], logits[2]], stage_features: [stages[0], stages[1], stages[2]] })
    }
}

/// Bilinear resize to an exact target size.
pub fn upsample_to(x: Var<'_>, size: (usize, usize)) -> Var<'_> {
    x.resize_bilinear(size.0, size.1)
}
