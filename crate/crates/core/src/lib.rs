//! Embedding-space sequence-to-sequence diffusion.

pub mod denoiser;
pub mod embedder;
pub mod harness;
pub mod inference;
pub mod metrics;
mod error;
pub mod model;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
pub use model::DiffusionModel;
