//! SHERL: memory-efficient transfer learning on a self-contained
//! differentiation core.
//!
//! The crate implements the full mechanism — anti-redundancy aggregation of
//! frozen intermediate features through a multi-tiered sensing adapter,
//! followed by a gated pass through the final frozen backbone layer — plus
//! the instrumentation that makes its memory and gradient-flow properties
//! checkable: a retained-buffer ledger, a gradient-flow auditor, and a
//! closed-form FLOP counter.

#![forbid(unsafe_code)]

pub mod accountant;
pub mod autograph;
pub mod backbones;
pub mod configfile;
pub mod error;
pub mod harness;
pub mod mtsa;
pub mod report;
pub mod rng;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
