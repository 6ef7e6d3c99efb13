//! Weight-space editing primitives for unlearning by task-vector negation.
//!
//! The crate is `no_std` and only needs `alloc`. It covers:
//!
//! * [`tensor`]: named, shaped F32/F64 tensor collections and their schemas,
//! * [`task_vector`]: weight deltas, scaled addition/negation and the sparse
//!   active-weight form,
//! * [`merging`]: sign-consensus merging plus the uniform, TIES, MagMax,
//!   conflict-only and greedy-soup comparators,
//! * [`consensus_stream`]: the same unanimity merge computed one vector at a
//!   time in memory independent of the pool size,
//! * [`analysis`]: sparsity accounting and retain-floor lambda selection.
//!
//! File formats, CLIs and the training harness live in companion crates.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod consensus_stream;
mod error;
pub mod merging;
pub mod task_vector;
pub mod tensor;

pub use crate::error::{Error, MismatchReason, Result};
pub use crate::tensor::{DType, Schema, Tensor, TensorData, TensorMap};

/// Sign with `sign(0) = 0`. Negative zero counts as zero.
#[inline]
pub fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}
