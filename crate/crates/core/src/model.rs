//! Encoder, pyramid and decoder assembled into one segmentation network.

use ndarray::{Array4, Ix4};
use sam3unet_tensor::{Graph, Var};

use crate::decoder::{Decoder, DecoderOutput};
use crate::encoder::{build_encoder, AdaptedEncoder, EncoderConfig, EncoderLayout};
use crate::error::Result;
use crate::nn::{apply_stat_updates, Ctx, NormMode, StatUpdate, BN_MOMENTUM};
use crate::params::{Param, ParamSpec, ParamStore, Role};
use crate::pyramid::{FeaturePyramid, Pyramid, PYRAMID_CHANNELS};

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput<'g> {
    pub embedding: Var<'g>,
    pub pyramid: FeaturePyramid<'g>,
    pub decoder: DecoderOutput<'g>,
}

#[derive(Debug, Clone)]
pub struct Sam3UNet {
    encoder: AdaptedEncoder,
    pyramid: Pyramid,
    decoder: Decoder,
}

impl Sam3UNet {
    /// Fresh model; each component gets its own stream derived from `seed`.
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let encoder = build_encoder(cfg, seed)?;
        let pyramid = Pyramid::new(cfg.embed_dim, seed.wrapping_add(1));
        let decoder = Decoder::new(seed.wrapping_add(2));
        Ok(Sam3UNet { encoder, pyramid, decoder })
    }

    pub fn from_parts(encoder: AdaptedEncoder, pyramid: Pyramid, decoder: Decoder) -> Self {
        Sam3UNet { encoder, pyramid, decoder }
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn encoder(&self) -> &AdaptedEncoder {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut AdaptedEncoder {
        &mut self.encoder
    }

    pub fn pyramid(&self) -> &Pyramid {
        &self.pyramid
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn forward<'g>(&'g self, ctx: &Ctx<'g>, images: Var<'g>) -> Result<ModelOutput<'g>> {
        let input_size = (images.dim(2), images.dim(3));
        let embedding = self.encoder.forward(ctx, images, true)?;
        let pyramid = self.pyramid.forward(ctx, embedding, input_size)?;
        let decoder = self.decoder.forward(ctx, &pyramid)?;
        Ok(ModelOutput { embedding, pyramid, decoder })
    }

    /// Foreground probabilities of the stride-4 head, `(B, 1, H, W)`.
    pub fn predict(&self, images: &Array4<f64>) -> Result<Array4<f64>> {
        let graph = Graph::no_grad();
        let ctx = Ctx::new(&graph, NormMode::Running);
        let out = self.forward(&ctx, ctx.input(images.clone().into_dyn()))?;
        let p = out.decoder.prediction().sigmoid().value();
        Ok(p.view().into_dimensionality::<Ix4>().expect("rank 4").to_owned())
    }

    fn stores(&self) -> [&ParamStore; 3] {
        [self.encoder.params(), self.pyramid.params(), self.decoder.params()]
    }

    /// Every tensor of the model, in name order.
    pub fn named_parameters(&self) -> Vec<(&str, &Param)> {
        let mut all: Vec<(&str, &Param)> = self.stores().into_iter().flat_map(ParamStore::iter).collect();
        all.sort_by(|a, b| a.0.cmp(b.0));
        all
    }

    pub fn trainable_parameters(&self) -> Vec<(&str, &Param)> {
        self.named_parameters().into_iter().filter(|(_, p)| p.trainable()).collect()
    }

    pub fn base_parameter_names(&self) -> Vec<String> {
        self.encoder.base_parameters().into_iter().map(|(n, _)| n.to_string()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.stores().into_iter().find_map(|s| s.get(name))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        if self.encoder.params().get(name).is_some() {
            self.encoder.params_mut().get_mut(name)
        } else if self.pyramid.params().get(name).is_some() {
            self.pyramid.params_mut().get_mut(name)
        } else {
            self.decoder.params_mut().get_mut(name)
        }
    }

    /// Folds batch-norm statistics from a training pass into running buffers.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        apply_stat_updates(self.decoder.params_mut(), updates, BN_MOMENTUM);
    }

    pub fn census(&self) -> Result<ParameterCensus> {
        ParameterCensus::for_config(self.config())
    }
}

/// Parameter counts by group, computed from specs alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCensus {
    /// Frozen backbone.
    pub base: usize,
    pub adapters: usize,
    pub pyramid: usize,
    /// Trainable decoder weights (batch-norm buffers excluded).
    pub decoder: usize,
    /// Batch-norm running statistics.
    pub buffers: usize,
}

fn count(specs: &[ParamSpec], role: Role) -> usize {
    specs.iter().filter(|s| s.role == role).map(ParamSpec::numel).sum()
}

impl ParameterCensus {
    pub fn for_config(cfg: &EncoderConfig) -> Result<Self> {
        let layout = EncoderLayout::new(cfg)?;
        let base = layout.base_specs().iter().map(ParamSpec::numel).sum();
        let adapters = layout.adapter_specs().iter().map(ParamSpec::numel).sum();
        let pyramid = Pyramid::specs(cfg.embed_dim).iter().map(ParamSpec::numel).sum();
        let decoder = Decoder::specs(PYRAMID_CHANNELS)?;
        Ok(ParameterCensus {
            base,
            adapters,
            pyramid,
            decoder: count(&decoder, Role::Trainable),
            buffers: count(&decoder, Role::Buffer),
        })
    }

    pub fn trainable(&self) -> usize {
        self.adapters + self.pyramid + self.decoder
    }

    /// Trainable weights relative to the frozen backbone size.
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable() as f64 / self.base as f64
    }

    pub fn total(&self) -> usize {
        self.base + self.trainable()
    }

    /// Training-memory accounting at `bytes_per_value` (4 for f32).
    pub fn memory(&self, bytes_per_value: usize) -> MemoryReport {
        let t = self.trainable() * bytes_per_value;
        MemoryReport {
            frozen_weights: (self.base + self.buffers) * bytes_per_value,
            trainable_weights: t,
            gradients: t,
            optimizer_state: 2 * t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub frozen_weights: usize,
    pub trainable_weights: usize,
    pub gradients: usize,
    /// AdamW first and second moments.
    pub optimizer_state: usize,
}

impl MemoryReport {
    /// Bytes that scale with the trainable set: weights, gradients, moments.
    pub fn trainable_state(&self) -> usize {
        self.trainable_weights + self.gradients + self.optimizer_state
    }

    pub fn total(&self) -> usize {
        self.frozen_weights + self.trainable_state()
    }
}

impl std::fmt::Display for ParameterCensus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "base (frozen)      {:>13}", self.base)?;
        writeln!(f, "adapters           {:>13}", self.adapters)?;
        writeln!(f, "pyramid            {:>13}", self.pyramid)?;
        writeln!(f, "decoder            {:>13}", self.decoder)?;
        writeln!(f, "bn buffers         {:>13}", self.buffers)?;
        write!(f, "trainable          {:>13} ({:.3}% of base)", self.trainable(), 100.0 * self.trainable_fraction())
    }
}
