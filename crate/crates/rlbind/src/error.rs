//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {shape:?}")]
    UnsupportedShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{what}: norm below {tol:e}, vector is degenerate")]
    DegenerateVector { what: &'static str, tol: f64 },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward already ran on this graph; record a fresh graph first")]
    BackwardAlreadyRan,

    #[error("node {id} does not belong to this graph")]
    DetachedNode { id: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("unknown {kind} `{name}`; accepted values: {accepted}")]
    UnknownVariant {
        kind: &'static str,
        name: String,
        accepted: &'static str,
    },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("unknown config key `{key}`")]
    UnknownConfigKey { key: String },

    #[error("perturbed input left the feasible region: {0}")]
    BallViolation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training: {0}")]
    Training(String),

    #[error("report: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
