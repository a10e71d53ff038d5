//! Single-scale token grid → four 128-channel maps at strides 4, 8, 16, 32.
//!
//! Each level has its own 1×1 convolution applied at token resolution,
//! followed by a bilinear resize to `floor(H / stride) × floor(W / stride)`.

use ndarray::{Array4, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sam3unet_tensor::{Graph, Var};

use crate::error::{Error, Result};
use crate::nn::{Conv1x1, Ctx, NormMode};
use crate::params::{ParamSpec, ParamStore};

pub const PREFIX: &str = "pyramid";
pub const PYRAMID_CHANNELS: usize = 128;
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Target spatial size of every level for an input of `(h, w)` pixels.
pub fn level_sizes(input: (usize, usize)) -> [(usize, usize); 4] {
    STRIDES.map(|s| (input.0 / s, input.1 / s))
}

/// Pyramid levels, finest (stride 4) first.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid<'g> {
    pub levels: [Var<'g>; 4],
    pub input_size: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Pyramid {
    embed_dim: usize,
    convs: [Conv1x1; 4],
    params: ParamStore,
}

impl Pyramid {
    pub fn layout(embed_dim: usize) -> [Conv1x1; 4] {
        std::array::from_fn(|k| Conv1x1::new(format!("{PREFIX}.proj{}", k + 1), embed_dim, PYRAMID_CHANNELS))
    }

    pub fn specs(embed_dim: usize) -> Vec<ParamSpec> {
        Self::layout(embed_dim).iter().flat_map(Conv1x1::specs).collect()
    }

    pub fn new(embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::materialize(&Self::specs(embed_dim), &mut rng);
        Pyramid { embed_dim, convs: Self::layout(embed_dim), params }
    }

    pub fn from_params(embed_dim: usize, params: ParamStore) -> Self {
        Pyramid { embed_dim, convs: Self::layout(embed_dim), params }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward<'g>(&'g self, ctx: &Ctx<'g>, embedding: Var<'g>, input_size: (usize, usize)) -> Result<FeaturePyramid<'g>> {
        let shape = embedding.shape();
        if shape.len() != 4 || shape[1] != self.embed_dim {
            return Err(Error::Shape(format!("pyramid expects a (B, {}, h, w) token grid, got {shape:?}", self.embed_dim)));
        }
        let sizes = level_sizes(input_size);
        if let Some(stride) = STRIDES.iter().zip(sizes).find(|(_, (h, w))| *h == 0 || *w == 0).map(|(s, _)| s) {
            return Err(Error::Shape(format!("input {input_size:?} is too small for the stride-{stride} level")));
        }
        let levels = std::array::from_fn(|k| {
            let (h, w) = sizes[k];
            self.convs[k].forward(ctx, &self.params, embedding).resize_bilinear(h, w)
        });
        Ok(FeaturePyramid { levels, input_size })
    }

    /// Inference helper returning the four maps as arrays.
    pub fn project(&self, embedding: &Array4<f64>, input_size: (usize, usize)) -> Result<[Array4<f64>; 4]> {
        let graph = Graph::no_grad();
        let ctx = Ctx::new(&graph, NormMode::Running);
        let pyr = self.forward(&ctx, ctx.input(embedding.clone().into_dyn()), input_size)?;
        Ok(pyr.levels.map(|v| v.value().view().into_dimensionality::<Ix4>().unwrap().to_owned()))
    }
}
