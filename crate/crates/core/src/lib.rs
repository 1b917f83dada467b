//! Open-vocabulary detection heads on precomputed region features.
//!
//! The pipeline trains a sigmoid focal-loss classifier and an L1 distillation
//! projector on base classes, pseudo-labels novel classes by exact top-K
//! cosine retrieval between text and proposal embeddings, linearly probes a
//! novel sigmoid head on those labels, concatenates both heads, fuses scores
//! with objectness and distillation similarity, and evaluates AP at IoU 0.5.

pub mod config;
pub mod datastore;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod pipeline;
pub mod probe;
pub mod retrieval;
pub mod seed;

pub mod cli;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
