//! Crate-wide error type.
//!
//! One enum covers all modules so that gradient callbacks, optimizer steps and
//! search loops can thread failures through a single `Result` alias without
//! conversion boilerplate at every layer boundary.

use std::fmt;

use crate::tape::Shape;
use crate::trace::SearchTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Two operands with incompatible shapes reached a tape op.
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    /// A node id referred to a position outside the current tape, e.g. an id
    /// kept across a tape rebuild.
    StaleNode { index: usize, len: usize },
    /// `backward` (or `forward_scalar`) was called on a non-scalar node.
    NonScalarRoot { index: usize, shape: Shape },
    /// A loss or gradient came out non-finite where finiteness is required.
    NonFinite { ctx: &'static str },
    /// A gradient evaluation at a finite-difference perturbation produced
    /// non-finite values; carries the step size that was used.
    NonFiniteHvp { eps: f64 },
    /// Generic argument validation failure; `ctx` names the operation.
    InvalidArg { ctx: &'static str, msg: String },
    /// Exhaustive enumeration would exceed the configured cap.
    EnumerationCap { required: u128, cap: u128 },
    /// An op kind was requested that the search space does not contain.
    UnknownOp { kind: String },
    /// A computation that needs at least one sample got an empty batch or
    /// an empty collection.
    EmptyData { ctx: &'static str },
    /// A data-dependent proxy metric was invoked without a batch.
    MetricNeedsBatch { metric: &'static str },
    /// Validation loss exceeded the divergence threshold for too long; the
    /// trace collected up to the abort is attached for post-mortem.
    Diverged { step: u64, trace: Box<SearchTrace> },
    /// Structured-text parsing failed (checkpoints, traces).
    Parse { ctx: String },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs} and {rhs}")
            }
            Error::StaleNode { index, len } => {
                write!(f, "node id {index} is stale: tape has {len} nodes")
            }
            Error::NonScalarRoot { index, shape } => {
                write!(f, "node {index} has shape {shape}; a scalar root is required")
            }
            Error::NonFinite { ctx } => write!(f, "{ctx}: non-finite value"),
            Error::NonFiniteHvp { eps } => {
                write!(f, "hvp: non-finite gradient at perturbation eps={eps:e}")
            }
            Error::InvalidArg { ctx, msg } => write!(f, "{ctx}: {msg}"),
            Error::EnumerationCap { required, cap } => {
                write!(f, "enumeration needs {required} entries, cap is {cap}")
            }
            Error::UnknownOp { kind } => write!(f, "op kind {kind:?} not in search space"),
            Error::EmptyData { ctx } => write!(f, "{ctx}: empty data"),
            Error::MetricNeedsBatch { metric } => {
                write!(f, "{metric} requires a data batch")
            }
            Error::Diverged { step, .. } => {
                write!(f, "search diverged at step {step} (validation loss runaway)")
            }
            Error::Parse { ctx } => write!(f, "parse error: {ctx}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
