//! Soft cross-modal alignment laboratory, `no_std` core.
//!
//! Everything here is pure computation over dense `f64` matrices: similarity
//! distributions and softened targets, the alignment objectives and their
//! analytic gradients, a synthetic many-to-many dataset generator, toy
//! dual-stream encoders with an AdamW training loop, and retrieval metrics.
//! File formats, the CLI and anything touching the OS live in the `salb`
//! companion crate.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]
// `!(x > 0.0)` style checks are used on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod distributions;
pub mod error;
pub mod gradcheck;
pub mod harness;
mod math;
pub mod numkit;
pub mod objectives;
pub mod synthgen;
pub mod trainer;

pub use distributions::{EmbeddingBatch, Modality, NegDisentangled, RowStochastic, Temperature, Temperatures};
pub use error::{Error, Result};
pub use numkit::{Matrix, Seed};
pub use objectives::{Divergence, LossBreakdown, LossConfig, SupervisionForm};
