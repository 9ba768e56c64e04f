//! Error type shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, CoreError>;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes do not conform to the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single-operand shape problem (wrong rank, empty, ...).
    BadShape { op: &'static str, detail: String },
    /// An operation produced NaN or Inf.
    NonFinite { op: &'static str, index: usize },
    /// `backward` was called on a non-scalar tensor.
    NonScalarLoss { shape: Vec<usize> },
    /// Second-order differentiation requested through an op that only
    /// supports first-order gradients.
    NotTwiceDifferentiable { op: &'static str },
    /// A truncation marker was placed between `begin_update_step` and
    /// `end_update_step`.
    TruncateInsideUpdate,
    /// Invalid argument outside the shape system (bad k, τ ≤ 0, M > T, ...).
    InvalidArg { what: String },
    /// Training loss became non-finite.
    Diverged { epoch: usize, lr: f64 },
    /// A label row carries no supervisory signal (all zeros).
    ZeroLabelRow { row: usize },
    /// A distribution row sums to zero and cannot be renormalized.
    ZeroSumRow { row: usize },
    /// Not enough examples of a class for the requested selection.
    ClassTooSmall {
        class: usize,
        have: usize,
        need: usize,
    },
    EmptyDataset,
    /// Nonlinear least squares could not produce a usable fit.
    FitFailed { reason: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            CoreError::BadShape { op, detail } => write!(f, "{op}: {detail}"),
            CoreError::NonFinite { op, index } => {
                write!(f, "{op}: non-finite value at flat index {index}")
            }
            CoreError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            CoreError::NotTwiceDifferentiable { op } => {
                write!(f, "{op} supports first-order gradients only")
            }
            CoreError::TruncateInsideUpdate => {
                write!(f, "tape truncated inside an update step")
            }
            CoreError::InvalidArg { what } => write!(f, "invalid argument: {what}"),
            CoreError::Diverged { epoch, lr } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch} with lr {lr}")
            }
            CoreError::ZeroLabelRow { row } => {
                write!(f, "label row {row} is all zeros: no supervisory signal")
            }
            CoreError::ZeroSumRow { row } => {
                write!(f, "distribution row {row} sums to zero")
            }
            CoreError::ClassTooSmall { class, have, need } => {
                write!(f, "class {class} has only {have} examples, need {need}")
            }
            CoreError::EmptyDataset => write!(f, "dataset is empty"),
            CoreError::FitFailed { reason } => write!(f, "curve fit failed: {reason}"),
        }
    }
}

impl core::error::Error for CoreError {}
