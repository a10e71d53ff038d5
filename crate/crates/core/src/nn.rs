//! Layer descriptors and the forward context that binds them to a graph.
//!
//! A layer here is just a name prefix plus sizes. It reports the parameter
//! specs it needs and, during a forward pass, pulls its tensors from the
//! component's [`ParamStore`] through [`Ctx::param`].

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, ArrayD, IxDyn};
use sam3unet_tensor::{Array, Gradients, Graph, Var};

use crate::params::{Init, ParamSpec, ParamStore, Role};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

/// How batch norms normalize during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the batch's own statistics and queue running-stat updates.
    Batch,
    /// Normalize with stored running statistics (inference, fixed-statistics checks).
    Running,
}

/// Batch statistics observed by one batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub layer: String,
    pub mean: Array1<f64>,
    pub unbiased_var: Array1<f64>,
}

pub struct Ctx<'g> {
    graph: &'g Graph,
    norm_mode: NormMode,
    leaves: RefCell<HashMap<String, Var<'g>>>,
    stat_updates: RefCell<Vec<StatUpdate>>,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g Graph, norm_mode: NormMode) -> Self {
        Ctx { graph, norm_mode, leaves: RefCell::default(), stat_updates: RefCell::default() }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn input(&self, value: Array) -> Var<'g> {
        self.graph.constant(value)
    }

    /// Leaf for a stored parameter, created once per graph. Only trainable
    /// parameters require a gradient.
    pub fn param(&self, store: &'g ParamStore, name: &str) -> Var<'g> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return *v;
        }
        let param = store.get(name).unwrap_or_else(|| panic!("parameter {name} is not in the store"));
        let var = self.graph.leaf_shared(param.value.clone(), param.trainable());
        self.leaves.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Gradients of every trainable parameter touched by this pass.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Array> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// Names of the parameters that were bound as gradient-requiring leaves.
    pub fn bound_trainable(&self) -> Vec<String> {
        let mut names: Vec<String> =
            self.leaves.borrow().iter().filter(|(_, v)| v.requires_grad()).map(|(k, _)| k.clone()).collect();
        names.sort();
        names
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }
}

/// Folds queued batch statistics into running buffers, PyTorch style:
/// `running = (1 - m) · running + m · batch`.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate], momentum: f64) {
    for update in updates {
        for (suffix, batch) in [("running_mean", &update.mean), ("running_var", &update.unbiased_var)] {
            let name = format!("{}.{suffix}", update.layer);
            let Some(param) = store.get_mut(&name) else { continue };
            let running = param.value_mut();
            for (r, &b) in running.iter_mut().zip(batch.iter()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

fn channel_vector(v: &Array, channels: usize) -> Array {
    v.clone().into_shape_with_order(IxDyn(&[1, channels, 1, 1])).expect("per-channel vector")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub role: Role,
    pub weight_init: Init,
    pub bias_init: Init,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize, role: Role) -> Self {
        let init = Init::kaiming_uniform(in_dim);
        Linear { prefix: prefix.into(), in_dim, out_dim, role, weight_init: init, bias_init: init }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight_init = Init::Zeros;
        self.bias_init = Init::Zeros;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(self.weight_name(), &[self.out_dim, self.in_dim], self.weight_init, self.role),
            ParamSpec::new(self.bias_name(), &[self.out_dim], self.bias_init, self.role),
        ]
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, store: &'g ParamStore, x: Var<'g>) -> Var<'g> {
        let w = ctx.param(store, &self.weight_name());
        let b = ctx.param(store, &self.bias_name());
        x.linear(w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
    pub role: Role,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize, role: Role) -> Self {
        LayerNorm { prefix: prefix.into(), dim, role }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{}.weight", self.prefix), &[self.dim], Init::Ones, self.role),
            ParamSpec::new(format!("{}.bias", self.prefix), &[self.dim], Init::Zeros, self.role),
        ]
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, store: &'g ParamStore, x: Var<'g>) -> Var<'g> {
        let w = ctx.param(store, &format!("{}.weight", self.prefix));
        let b = ctx.param(store, &format!("{}.bias", self.prefix));
        x.layer_norm_last(LN_EPS).mul(w).add(b)
    }
}

/// Pointwise convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv1x1 {
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Conv1x1 { prefix: prefix.into(), in_channels, out_channels }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let init = Init::kaiming_uniform(self.in_channels);
        vec![
            ParamSpec::new(
                format!("{}.weight", self.prefix),
                &[self.out_channels, self.in_channels, 1, 1],
                init,
                Role::Trainable,
            ),
            ParamSpec::new(format!("{}.bias", self.prefix), &[self.out_channels], init, Role::Trainable),
        ]
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, store: &'g ParamStore, x: Var<'g>) -> Var<'g> {
        let w = ctx.param(store, &format!("{}.weight", self.prefix));
        let b = ctx.param(store, &format!("{}.bias", self.prefix));
        x.conv1x1(w, Some(b))
    }
}

/// 3×3 depthwise convolution (groups = channels), padding 1, with bias.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    pub prefix: String,
    pub channels: usize,
}

impl DepthwiseConv3x3 {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        DepthwiseConv3x3 { prefix: prefix.into(), channels }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let init = Init::kaiming_uniform(9);
        vec![
            ParamSpec::new(format!("{}.weight", self.prefix), &[self.channels, 1, 3, 3], init, Role::Trainable),
            ParamSpec::new(format!("{}.bias", self.prefix), &[self.channels], init, Role::Trainable),
        ]
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, store: &'g ParamStore, x: Var<'g>) -> Var<'g> {
        let w = ctx.param(store, &format!("{}.weight", self.prefix));
        let b = ctx.param(store, &format!("{}.bias", self.prefix));
        x.depthwise3x3(w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub prefix: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d { prefix: prefix.into(), channels }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let c = [self.channels];
        vec![
            ParamSpec::new(format!("{}.weight", self.prefix), &c, Init::Ones, Role::Trainable),
            ParamSpec::new(format!("{}.bias", self.prefix), &c, Init::Zeros, Role::Trainable),
            ParamSpec::new(format!("{}.running_mean", self.prefix), &c, Init::Zeros, Role::Buffer),
            ParamSpec::new(format!("{}.running_var", self.prefix), &c, Init::Ones, Role::Buffer),
        ]
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, store: &'g ParamStore, x: Var<'g>) -> Var<'g> {
        let c = self.channels;
        let gamma = ctx.param(store, &format!("{}.weight", self.prefix)).reshape(&[1, c, 1, 1]);
        let beta = ctx.param(store, &format!("{}.bias", self.prefix)).reshape(&[1, c, 1, 1]);
        let normalized = match ctx.norm_mode() {
            NormMode::Batch => {
                let (xhat, stats) = x.batch_norm_train(BN_EPS);
                ctx.stat_updates.borrow_mut().push(StatUpdate {
                    layer: self.prefix.clone(),
                    unbiased_var: stats.unbiased_var(),
                    mean: stats.mean,
                });
                xhat
            }
            NormMode::Running => {
                let mean = store.value(&format!("{}.running_mean", self.prefix));
                let var = store.value(&format!("{}.running_var", self.prefix));
                let inv_std: ArrayD<f64> = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let mean = ctx.input(channel_vector(mean, c));
                let inv_std = ctx.input(channel_vector(&inv_std, c));
                x.sub(mean).mul(inv_std)
            }
        };
        normalized.mul(gamma).add(beta)
    }
}
