//! Crossing-intention prediction from multi-modal spatio-temporal features.
//!
//! The crate provides, from the ground up:
//!
//! - dense tensors with tape-based reverse-mode differentiation
//!   ([`tensor`], [`tape`]),
//! - the network blocks and the fused classifier ([`nn`], [`fusion`]),
//! - AdamW training ([`optim`]),
//! - the on-disk sample format, normalization and augmentation ([`data`]),
//! - a procedural scenario generator for reproducible experiments
//!   ([`synthgen`]),
//! - ROC-AUC / F1 evaluation ([`metrics`]),
//! - finite-difference gradient verification ([`gradcheck`]).

pub mod data;
pub mod error;
pub mod nn;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{NodeId, Tape};
pub use tensor::{Scalar, Tensor};
