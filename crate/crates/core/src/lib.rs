//! Gradient-matching text distillation.
//!
//! Synthesizes short, readable token sequences whose last-layer gradients on
//! a small language model match the (optionally differentially private)
//! gradient of a real fine-tuning set. The search alternates between
//! continuous embedding optimization and a top-k constrained projection back
//! onto the vocabulary, using ADMM.
//!
//! Modules, bottom-up:
//! - [`autodiff`]: dense tensors and reverse-mode differentiation.
//! - [`lm`]: tokenizer, tiny transformer LM, training, checkpoints, data.
//! - [`target`]: per-sample clipping and Gaussian-noised gradient targets.
//! - [`admm`]: the distillation loop.
//! - [`filter`]: label check, lowest-loss selection, class balancing.
//! - [`theory`]: executable convergence checks on quadratic losses.
//! - [`metrics`]: accuracy, FID, nearest-real distances, membership inference.

pub mod admm;
pub mod autodiff;
pub mod error;
pub mod filter;
pub mod lm;
pub mod metrics;
pub mod rng;
pub mod target;
pub mod theory;

pub use autodiff::{Graph, NodeId, Tensor};
pub use error::{Error, Result};
pub use rng::SeedStream;
