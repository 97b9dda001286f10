//! Tactic-conditioned adapters on a frozen multi-head RTS policy.
//!
//! The crate covers the whole pipeline: build-order text parsing and rating
//! filters, the nine-way tactic taxonomy, rule-based and endpoint-backed
//! labelers, a small multi-head recurrent policy, zero-initialized adapters
//! conditioned on a tactic vector, KL-constrained distillation training and a
//! synthetic environment for measuring how far conditioning moves behavior.
//!
//! Numerics run on a small reverse-mode autodiff engine in [`graph`]. Batch
//! work (trajectory generation, trunk caching, evaluation sweeps, matmul row
//! blocks) is data-parallel through [`par`], which uses rayon when the
//! `parallel` feature is on and falls back to plain iterators otherwise.

pub mod adapter;
pub mod buildorder;
pub mod categorical;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod labeler;
pub mod nn;
pub mod par;
pub mod policy;
pub mod synth;
pub mod taxonomy;
pub mod tensor;
pub mod trainer;

pub use error::NumericError;
pub use graph::{Graph, Var};
pub use tensor::{Bound, ParamId, ParamStore, Tensor};
