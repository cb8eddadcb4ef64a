//! Task-driven representations of sentence-final discourse particles.
//!
//! The crate covers the whole batch pipeline: corpus normalization and
//! particle detection ([`corpus`]), NSP / particle-prediction dataset
//! construction ([`taskgen`]), a small from-scratch transformer encoder
//! ([`encoder`]), particle isolation by embedding subtraction ([`lir`]),
//! t-SNE + DBSCAN clustering ([`cluster`]), evaluation measures
//! ([`metrics`]) and a word-alignment translator with a back-translation
//! loop ([`translate`]). [`synth`] generates the bundled synthetic corpora.

pub mod cluster;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod lir;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod taskgen;
pub mod translate;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
