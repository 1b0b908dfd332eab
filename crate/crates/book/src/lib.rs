//! The guide in `book/` is an mdbook, which cannot run its Rust listings as
//! tests. Each chapter is pulled in here as a module doc so `cargo test`
//! runs every listing as a doc-test, one module per chapter.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}

#[doc = include_str!("../../../book/src/graph.md")]
pub mod graph {}

#[doc = include_str!("../../../book/src/quantization.md")]
pub mod quantization {}

#[doc = include_str!("../../../book/src/pruning.md")]
pub mod pruning {}

#[doc = include_str!("../../../book/src/early-exits.md")]
pub mod early_exits {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[doc = include_str!("../../../docs/model-format.md")]
pub mod model_format {}

#[doc = include_str!("../../../README.md")]
pub mod readme {}
