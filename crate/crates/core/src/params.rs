//! Named parameter storage.
//!
//! Every component declares its tensors as a list of [`ParamSpec`]s. The
//! list alone is enough for a parameter census, so full-scale counts never
//! allocate; [`ParamStore::materialize`] turns the same list into buffers.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sam3unet_tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Updated by the optimizer.
    Trainable,
    /// Part of the pretrained backbone; never updated.
    Frozen,
    /// Non-gradient state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform(f64),
    /// Normal with the given standard deviation, truncated at two sigmas.
    TruncNormal(f64),
}

impl Init {
    /// Default for linear and convolution weights: Kaiming-uniform with
    /// `a = sqrt(5)`, i.e. a bound of `1 / sqrt(fan_in)`. Biases use the
    /// same bound.
    pub fn kaiming_uniform(fan_in: usize) -> Init {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub role: Role,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init, role: Role) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), init, role }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Arc<Array>,
    pub role: Role,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.role == Role::Trainable
    }

    /// Mutable access; copies the buffer only if a graph still shares it.
    pub fn value_mut(&mut self) -> &mut Array {
        Arc::make_mut(&mut self.value)
    }
}

/// Ordered name → parameter map. Ordering is lexicographic so iteration,
/// checkpoints and optimizer updates are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

fn sample(init: Init, shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        Init::TruncNormal(std) => (0..n)
            .map(|_| loop {
                // Box-Muller; resample outside two sigmas.
                let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.random();
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect(),
    };
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("spec shape")
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates and initializes every spec in order, drawing from `rng`.
    pub fn materialize(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        for spec in specs {
            let value = sample(spec.init, &spec.shape, rng);
            let previous = store.params.insert(spec.name.clone(), Param { value: Arc::new(value), role: spec.role });
            assert!(previous.is_none(), "duplicate parameter name {}", spec.name);
        }
        store
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    /// Value lookup for names that are known to exist.
    pub fn value(&self, name: &str) -> &Arc<Array> {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.params.insert(name.into(), param);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self, role: Role) -> usize {
        self.params.values().filter(|p| p.role == role).map(|p| p.value.len()).sum()
    }
}
