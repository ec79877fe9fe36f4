//! Context knowledge transfer between two frozen world-action models.
//!
//! A frozen teacher encodes the current observation once; its intermediate
//! hidden states are compressed by learnable-query cross-attention, routed
//! through an always-on generalized adapter plus a sparse bank of
//! specialized adapters, and appended to the frozen student's text
//! conditioning. Only the transfer module ([`ckt::CktModule`]) is trained.
//!
//! Module map:
//! - [`tensor`]: dense tensors with a reverse-mode tape
//! - [`backbone`]: synthetic frozen teacher and student (with 3D rotary encoding)
//! - [`ckt`]: the trainable transfer module and its parameter accounting
//! - [`injection`]: conditioning hook and per-observation context cache
//! - [`training`]: noise schedule, losses, AdamW and the training loop
//! - [`harness`]: run config, checkpoints, synthetic data, reports and checks

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod ckt;
pub mod error;
pub mod harness;
pub mod injection;
pub mod tensor;
pub mod training;

pub use error::{CktError, Result};
