//! Concept bottleneck models with additional unsupervised concepts.
//!
//! A shared backbone `h(x)` feeds a concept encoder (sigmoid supervised
//! concepts plus k-WTA unsupervised concepts) and a relevance network
//! `θ(h)`; the prediction is `θ · c`. Training combines the task loss, a
//! concept loss, an infomax-style discriminator over `[c; h]` pairs, and a
//! stability penalty on `∇_h f − θᵀ J^c_h`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod nets;
pub mod plot;
pub mod saliency;
pub mod training;

pub use config::{ModelConfig, ModelKind, RunConfig, TaskKind};
pub use error::{CoreError, Result};
