//! DCIN: a decision-making context interaction network for click-through
//! rate prediction, built from scratch on a small reverse-mode gradient
//! engine.
//!
//! The crate covers the full desk-scale workflow: synthetic impression-log
//! generation, Avito-style sample construction, embeddings, the context
//! interaction units (explicit page context and implicit candidate context),
//! adaptive interest aggregation, training with AdaGrad, metrics, and an
//! experiment harness for ablations and top-k sweeps.

pub mod aiau;
pub mod checkpoint;
pub mod ciu;
pub mod data;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
