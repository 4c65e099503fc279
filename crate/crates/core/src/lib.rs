//! Desk-scale retrieval-enhanced language-model pipeline for click-through
//! rate prediction.
//!
//! The crate builds the full stack from scratch: MovieLens-style ingestion
//! with temporal splitting, semantic behavior retrieval over PCA-reduced item
//! vectors, a small ID-embedding recommendation model, a toy causal
//! transformer with adapter hook points, the component fully-interactive LoRA
//! (CFLoRA) family realizing `ΔΘ = B·W·A`, soft prompt augmentation, and an
//! evaluation/analysis CLI. Correctness rests on algebraic equivalences,
//! finite-difference gradient checks, and brute-force oracles rather than
//! large-scale benchmarks.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod crm;
pub mod data;
pub mod error;
pub mod eval;
pub mod lm;
pub mod metrics;
pub mod numerics;
pub mod prompt;
pub mod rng;
pub mod run;
pub mod selftest;
pub mod subr;
pub mod train;

pub use error::{Error, Result};
