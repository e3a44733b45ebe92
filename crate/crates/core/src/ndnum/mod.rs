//! Minimal deterministic numeric core: dense tensors, MLPs with analytic
//! backprop, Adam, and explicit-state Gaussian RNG.

mod adam;
pub mod checkpoint;
mod mlp;
mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use mlp::{Activation, Layer, LayerGrads, MlpCache, MlpGrads, MlpNet};
pub use rng::Rng;
pub use tensor::Tensor2;
