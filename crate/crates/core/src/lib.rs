//! Linear classifier probes for neural-network layers.
//!
//! The crate bundles everything needed to train small networks on the CPU,
//! freeze them at chosen checkpoints, and fit a softmax linear classifier
//! ("probe") on the activations of every intermediate layer:
//!
//! - [`tensor`]: dense `f32`/`f64` tensors and the differentiable primitives.
//! - [`graph`]: layer graphs with loss heads, auxiliary heads and skip links.
//! - [`optim`]: SGD and RMSProp.
//! - [`probe`]: gradient-isolated probes and the per-checkpoint probe suite.
//! - [`entropy`]: discrete entropies and the Markov-chain ordering check.
//! - [`experiments`]: datasets, checkpoints and the scenario driver.
//! - [`report`]: probe records, aggregation and SVG layer curves.

pub mod entropy;
mod error;
pub mod experiments;
pub mod graph;
pub mod optim;
pub mod par;
pub mod probe;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
