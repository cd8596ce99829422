//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Single-threaded per tape. A [`Tensor`] outside a tape is a plain value
//! and can be shared read-only across threads.

mod alloc;
mod fastmath;
mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{softmax_rows_values, AttnLayout, Tape, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
