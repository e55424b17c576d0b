//! Differentiable hierarchical structured pruning for Vision Transformers.
pub mod checkpoint;
pub mod cli;
pub mod cost;
pub mod data;
pub mod error;
pub mod extraction;
pub mod gating;
pub mod model;
pub mod objective;
pub mod optim;
pub mod plot;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
