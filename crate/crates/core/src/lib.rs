//! Per-datum cooperative weighting of multiple frozen models.
//!
//! A bank of task models is combined two ways with the same per-datum weight
//! vector (a CoopVec): parameter-level merging and prediction-level
//! ensembling. A single-linear-layer gating network (Portland) produces the
//! CoopVecs; its loss couples an ensembling booster with an offset-alignment
//! term so the two combination routes track each other. The `taylor` module
//! measures the order of the merging-vs-ensembling residual directly, and
//! `harness` reproduces the evaluation protocols end to end.

pub mod collab;
pub mod coopmap;
pub mod data;
pub mod error;
pub mod harness;
pub mod mlp;
pub mod num;
pub mod par;
pub mod portland;
pub mod taylor;

pub use error::{Error, Result};
