//! Layer-by-layer channel pruning for small convolutional networks.
//!
//! Channels of each conv layer are selected by an l1-penalised fit of the
//! uncompressed layer response, weighted by the loss gradient and gated by
//! the compressed model's own response, and the surviving weights are then
//! refit by least squares. Reconstruction-only and weight-magnitude
//! selectors are included as baselines.

pub mod error;
pub mod flops;
pub mod harness;
pub mod layers;
pub mod model_io;
pub mod network;
pub mod optim;
pub mod pruner;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
