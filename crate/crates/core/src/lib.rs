//! Desk-scale laboratory for vision-guided preference optimization.
//!
//! The crate provides, bottom up:
//!
//! - [`tensor`] / [`graph`] / [`gradcheck`]: a minimal reverse-mode autodiff
//!   engine over dense 64-bit tensors with a finite-difference harness;
//! - [`policy`]: a fully specified toy vision-conditioned autoregressive
//!   policy with deterministic initialization, frozen copies, and a binary
//!   checkpoint format;
//! - [`objectives`]: the DPO / guided-DPO loss family (plain and normalized
//!   guidance, dynamic or static unconditioned source) plus the tabular
//!   objective used by the stationarity oracle;
//! - [`world`] / [`pipeline`]: a procedural scene world and the synthetic
//!   preference-pair pipeline with mutual-argmax filtering and ratio gating;
//! - [`trainer`]: deterministic SFT and preference training with Adam,
//!   checkpoint/resume, and CSV/JSON logs;
//! - [`eval`]: discriminative/generative hallucination metrics and
//!   log-likelihood gap analysis.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod objectives;
pub mod jsonl;
pub mod pipeline;
pub mod policy;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use tensor::Tensor;
