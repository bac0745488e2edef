//! MetaAdamW: AdamW with per-group learning-rate and weight-decay modulation
//! factors produced by a small self-attention network over group statistics,
//! trained online through a periodic meta-update.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff (higher-order
//!   capable).
//! - [`nn`]: shared neural building blocks (linear, layer norm, transformer
//!   encoder) on top of the tensor engine.
//! - [`model`]: desk-scale trainable models whose parameters carry the
//!   grouping metadata.
//! - [`grouping`]: partition of parameters into modulation groups.
//! - [`features`]: per-group statistics fed to the modulation network.
//! - [`modulation`]: the attention network producing (alpha, beta,
//!   lambda1, lambda2) per group.
//! - [`optimizer`]: AdamW and the modulated MetaAdamW step.
//! - [`meta`]: the periodic meta-update of the modulation network.
//! - [`checkpoint`]: binary tensor-table envelope used by all checkpoints.

pub mod checkpoint;
pub mod features;
pub mod grouping;
pub mod meta;
pub mod model;
pub mod modulation;
pub mod nn;
pub mod optimizer;
pub mod rng;
pub mod tensor;

pub use tensor::{grad, no_grad, Tensor, TensorError, TensorResult};
