//! Crate-wide error type.
//!
//! Every fallible contract in the crate surfaces here: shape mismatches and
//! non-finite values in the differentiation graph, degenerate inputs to
//! normalization and sampling, malformed data files, and training aborts.
//! Variants carry enough context (node ids, row indices, file positions) to
//! locate the offending input without a debugger.

use std::fmt;
use std::io;

/// Alias used by every fallible function in the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Operands of a graph operation (or a public constructor) disagree in shape.
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    /// A graph operation produced a NaN or infinity; `node` is the id the
    /// offending node would have received.
    NonFinite {
        op: &'static str,
        node: usize,
    },
    /// `backward` was called on a node whose value is not a single scalar.
    NotScalar {
        node: usize,
        len: usize,
    },
    /// A vector that must be normalized has norm below the 1e-12 floor.
    DegenerateNorm {
        context: &'static str,
        row: usize,
    },
    /// Temperature, probability, count or other scalar argument out of range.
    InvalidArg {
        what: String,
    },
    /// An embedding row that must lie on the unit sphere does not.
    NonUnitRow {
        row: usize,
        norm: f64,
    },
    /// Every anchor in a supervised batch has an empty positive set.
    NoPositives,
    /// Training aborted on a non-finite loss; carries the failing step and
    /// the last finite term values for diagnosis.
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    /// Underlying I/O failure.
    Io(io::Error),
    /// A data or config file could not be parsed. `line` is 1-based; 0 means
    /// the error is not tied to a single line.
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    /// A checkpoint is malformed or inconsistent with the requested resume.
    Checkpoint {
        detail: String,
    },
    /// A Monte-Carlo estimate failed its convergence assertion.
    ConvergenceFailure {
        detail: String,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in `{op}`: {detail}")
            }
            Error::NonFinite { op, node } => {
                write!(f, "non-finite value produced by `{op}` at graph node {node}")
            }
            Error::NotScalar { node, len } => {
                write!(
                    f,
                    "backward requires a scalar output; node {node} has {len} elements"
                )
            }
            Error::DegenerateNorm { context, row } => {
                write!(
                    f,
                    "degenerate vector in {context}: row {row} has l2 norm below 1e-12"
                )
            }
            Error::InvalidArg { what } => write!(f, "invalid argument: {what}"),
            Error::NonUnitRow { row, norm } => {
                write!(f, "embedding row {row} is not unit length (norm = {norm})")
            }
            Error::NoPositives => {
                write!(f, "every anchor has an empty positive set; loss undefined")
            }
            Error::NonFiniteLoss {
                epoch,
                batch,
                detail,
            } => {
                write!(
                    f,
                    "non-finite loss at epoch {epoch}, batch {batch}: {detail}"
                )
            }
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Parse { path, line, detail } => {
                if *line == 0 {
                    write!(f, "parse error in {path}: {detail}")
                } else {
                    write!(f, "parse error in {path}:{line}: {detail}")
                }
            }
            Error::Checkpoint { detail } => write!(f, "checkpoint error: {detail}"),
            Error::ConvergenceFailure { detail } => {
                write!(f, "convergence failure: {detail}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
