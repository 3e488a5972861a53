//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations as they are applied; [`Graph::backward`]
//! then propagates gradients from a scalar loss back to every trainable
//! leaf. The operator set is deliberately small: what a residual CNN, a few
//! fully connected branches, a skinned hand model and a fisheye projection
//! need.
//!
//! ```
//! use handreg_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(&[1.0, -2.0, 3.0]));
//! let sq = g.square(x);
//! let loss = g.mean(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).data(), &[2.0 / 3.0, -4.0 / 3.0, 2.0]);
//! ```

mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use error::{AutodiffError, Result};
pub use graph::{Graph, Var};
pub use params::{optimizer_step, AdamConfig, AdamState, BoundParams, ParamId, ParamStore};
pub use tensor::{Tensor, MAX_RANK};
