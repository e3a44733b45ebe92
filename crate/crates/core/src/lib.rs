//! One-step distillation of conditional diffusion policies.
//!
//! A multi-step ε-prediction teacher is distilled into a generator that maps
//! pure noise and an observation to an action chunk in a single network
//! evaluation. The generator is trained against a frozen copy of the teacher
//! and a dynamically updated copy that tracks the generator's own output
//! distribution; the difference of their denoised outputs is the gradient
//! signal.
//!
//! Modules, bottom-up:
//! - [`ndnum`]: tensors, MLPs with analytic backprop, Adam, RNG, checkpoints
//! - [`diffusion`]: noise schedule, teacher training, sampling, score estimates
//! - [`sdm`]: the one-step generator, corrector pair, and distillation loop
//! - [`tasks`]: Gaussian-mixture and point-mass tasks with exact oracles
//! - [`eval`]: MMD², mode coverage, success rate, action error, latency
//! - [`config`] and [`pipeline`]: run configuration and command pipelines

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod ndnum;
pub mod pipeline;
pub mod sdm;
pub mod tasks;

pub use error::{Error, Result};
