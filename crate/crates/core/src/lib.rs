//! Edge-optimization toolkit for small convolutional networks.
//!
//! The crate bundles a minimal NCHW inference engine ([`graph`]) with the
//! three compression families it is meant to study: structured pruning
//! ([`prune`]), uint8 quantization ([`quant`]) and entropy-gated early-exit
//! cascades ([`exit`]). [`metrics`] computes the comparison metrics and
//! [`experiment`] wires everything into reproducible pipelines.

pub mod data;
pub mod error;
pub mod exit;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod prob;
pub mod prune;
pub mod quant;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{count_macs, forward, load_model, save_model, Graph, LayerKind, LayerSpec};
pub use tensor::{DType, Tensor};
