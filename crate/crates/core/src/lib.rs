//! Context outlook attention over a transformer encoder.
//!
//! A small f64 reverse-mode autodiff engine drives every layer: the global
//! encoder, an optional multi-width convolutional block, and stacked outlook
//! layers that mix each token's neighbourhood with weights generated from the
//! anchor token alone. The pieces can be wired in three ways (local context
//! after, before, or alongside the global encoder) and trained for span
//! extraction, sequence classification, token tagging or multiple choice.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod outlook;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use config::{Config, Mode, ModelConfig, TaskKind, TrainConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::Model;
pub use params::{ParameterStore, Session};
pub use tensor::{Tensor, TensorError};
