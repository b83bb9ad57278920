//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Everything above this module computes through [`Tape`]: the trainer
//! records forward operations and replays them backward for gradients,
//! inference runs the same operations with recording disabled. A central
//! finite-difference oracle ([`grad_check`]) verifies every backward rule.
//!
//! Scalar type is a compile-time parameter: training runs at `f32`,
//! gradient checking at `f64`. Mixing the two in one expression is a type
//! error, so the dtype-mismatch failure mode cannot occur at runtime.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{analytic_grads, grad_check, numeric_grads, rel_err};
pub use tape::{Tape, Var};
pub use tensor::{matmul_into, Tensor};

pub(crate) use tape::{gelu_fwd, row_norm_stats, softmax_row};

use thiserror::Error;

/// Scalar element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}
impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Shorthand for converting an `f64` literal into the active scalar type.
pub fn scalar<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("f64 conversion")
}

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: loss is detached from the tape (no gradient path)")]
    DetachedLoss,
    #[error("cross_entropy_masked: mask selects no positions")]
    EmptyMask,
    #[error("cross_entropy_masked: target id {id} out of vocabulary (V={vocab})")]
    TargetOutOfVocab { id: u32, vocab: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;
