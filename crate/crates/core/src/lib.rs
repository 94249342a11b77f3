//! Toolkit for fine-grained hallucination work on span-annotated image
//! descriptions: corpus handling, sentence condensation, segment-level
//! reward models, a per-segment preference loss, rejection sampling and
//! evaluation metrics.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fdpo;
pub mod metrics;
pub mod optim;
pub mod reward;
pub mod scorer;
pub mod segmenter;
pub mod selector;
pub mod server;

pub use error::{Error, Result};
