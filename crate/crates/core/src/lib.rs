//! Reweighted proximal pruning for a small transformer encoder.
//!
//! The crate bundles a reverse-mode autodiff engine over `f64` tensors, a
//! BERT-style encoder with masked-token and sentence-pair heads, synthetic
//! corpora and downstream tasks, the proximal AdamW optimizer with
//! reweighted ℓ1 factors, magnitude-pruning baselines, sparse-pattern
//! analysis and an experiment runner with checkpoints.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod pattern;
pub mod protocols;
pub mod prox;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamSet, TensorMap};
pub use tensor::Tensor;
