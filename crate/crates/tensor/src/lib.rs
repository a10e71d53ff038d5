//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a tape. Ops are methods on [`Var`], a copyable handle
//! into the tape; [`Graph::backward`] returns gradients for every leaf that
//! was created with `requires_grad`.
//!
//! ```
//! use ndarray::{arr1, ArrayD};
//! use sam3unet_tensor::Graph;
//!
//! let g = Graph::new();
//! let x = g.leaf(arr1(&[1.0, -2.0]).into_dyn(), true);
//! let y = x.mul(x).sum();
//! let grads = g.backward(y);
//! assert_eq!(grads.get(x).unwrap(), &arr1(&[2.0, -4.0]).into_dyn());
//! ```

mod graph;
pub mod ops;

pub use graph::{Array, Gradients, Graph, Var};
pub use ops::norm::BatchStats;
pub use ops::pointwise::{bce_with_logits_scalar, gelu_scalar, sigmoid_scalar};
pub use ops::resample::{bicubic_plane, bilinear_plane, linear_taps, nearest_indices, LinearTap};
