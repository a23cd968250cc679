//! Desk-scale simulation of collaborative machine learning for DGA detection.
//!
//! The crate bundles everything needed to rerun a comparative study of
//! collaborative training strategies on synthetic NXD traffic:
//!
//! - [`nn`]: a minimal f64 neural-network engine (embedding, LSTM, conv1d,
//!   residual block, dense) with reverse-mode gradients, Adam, and an
//!   early-stopping training loop.
//! - [`models`]: the three character-level classifier archetypes (`endgame`,
//!   `nyu`, `resnet`), domain encoding, and feature-extractor split/combine.
//! - [`synth`]: deterministic generators for DGA families, per-network benign
//!   NXD traffic, and a ranked public domain list.
//! - [`pipeline`]: dataset assembly — per-family caps, stratified test folds,
//!   per-org malicious subsampling, balanced train/test pairs, repetitions.
//! - [`sharing`]: the five training regimes (baseline, ensemble, federated
//!   learning, feature-extractor sharing, teacher-student).
//! - [`eval`]: metrics, best/average/worst-case scenario aggregation, the
//!   experiment planner, and baseline comparison.
//!
//! Everything is deterministic given a master seed; see [`seed`] for the
//! fan-out scheme.

pub mod audit;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod sharing;
pub mod synth;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
