//! Crate-wide error type and the process exit codes the CLI maps it to.

use thiserror::Error;

/// Everything that can go wrong across the pipeline.
///
/// Variants are grouped by the exit code the CLI reports:
/// configuration and usage problems exit 1, data and format problems
/// exit 2, and numerical aborts exit 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Operands disagree on shape, e.g. a matmul inner-dimension mismatch.
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A value fails a structural precondition that is not a shape pair.
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// Bad run configuration (unknown keys, out-of-range values, bad flags).
    #[error("configuration error: {0}")]
    Config(String),

    /// An on-disk artifact is malformed; always names the offending path.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    /// A function under finite-difference checking produced a non-finite value.
    #[error("evaluation error during gradient check: {0}")]
    Evaluation(String),

    /// An attention row was fully masked and no fallback was requested.
    #[error("attention row {row} is fully masked and no fallback applies")]
    MaskedRow { row: usize },

    /// Context condensation was asked for more rows than exist.
    #[error("cannot keep {keep} context rows out of {available}")]
    EmptyContext { keep: usize, available: usize },

    /// Input geometry is incompatible with the encoder configuration.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// The episode generator exhausted its retry budget.
    #[error("generation error: {0}")]
    Generation(String),

    /// Training produced a non-finite loss; carries the component breakdown.
    #[error("numerical abort at iteration {iteration}: {breakdown}")]
    NumericalAbort { iteration: u64, breakdown: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument { .. } => 1,
            Error::NumericalAbort { .. } => 3,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
