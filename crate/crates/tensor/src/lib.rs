//! Minimal dense tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is plain row-major data; [`Tape`] records operations on
//! [`Var`] handles and differentiates them. Parameters live in a
//! [`ParamStore`] and are copied onto a tape per forward pass, so one store
//! can feed any number of independent tapes.

mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{attention, concat, AttentionMask, Reduction, Tape, Var};
pub use tensor::{Param, ParamId, ParamStore, Tensor};

/// Large negative score used in place of minus infinity when masking logits.
pub const MASK_VALUE: f64 = -1e9;
