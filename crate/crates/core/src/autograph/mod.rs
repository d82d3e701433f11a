//! Minimal reverse-mode differentiation core with explicit retained-buffer
//! accounting. Everything downstream (adapter, backbones, harness,
//! accountant) runs on these primitives.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, REL_EPS};
pub use tape::{GradientMap, Node, Op, PoolKind, ReduceKind, SavedBuf, Tape};
pub use tensor::{NodeRef, Tensor, ValueId};
