//! tsnormlab: a laboratory for studying how time-series preprocessing
//! (standard, min-max, robust, quantile scaling; per-instance or pooled)
//! affects the expressivity of a small Transformer encoder.
//!
//! The crate provides:
//! - dense matrix primitives and deterministic splittable RNG ([`linalg`])
//! - the normalization strategy suite with fit/transform/invert ([`normalize`])
//! - dataset ingestion (`.ts`, CSV), tokenization, synthetic generators ([`data`])
//! - a from-scratch multi-head-attention encoder with forward traces ([`model`])
//! - hand-derived gradients, Adam, finite-difference checks, training ([`grad`])
//! - expressivity bounds and Monte-Carlo estimates ([`expressivity`])
//! - sweep/report orchestration backing the `tsnormlab` CLI ([`bench`])
//!
//! Start with the runnable examples: `cargo run --example bound_report`,
//! `cargo run --example train_classification`, and friends.

pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod normalize;
pub mod expressivity;
pub mod grad;
pub mod linalg;

pub use error::{Error, Result};
