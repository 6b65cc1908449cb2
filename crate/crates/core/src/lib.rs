//! Fusion compiler for reduction-centric tensor programs.
//!
//! The pipeline: build a [`ir::TensorGraph`], extract per-op computation
//! sketches, fuse producers into consumers (structurally, via the online
//! reduction rewrite, or after tiling), plan a logical grid per fused kernel,
//! and execute tiled kernels while accounting memory traffic. A naive
//! materialize-everything evaluator ([`eval::eval_naive`]) is the oracle.

pub mod algebra;
pub mod dsl;
pub mod error;
pub mod eval;
pub mod exec;
pub mod expr;
pub mod grid;
pub mod ir;
pub mod rewrite;
pub mod schedule;
pub mod sketch;
pub mod tensor;
pub mod variants;

pub use error::{Error, Result};
