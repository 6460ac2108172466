use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{what} not found: {path}")]
    NotFound { what: &'static str, path: PathBuf },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("size mismatch: expected {expected} bytes of payload, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("no observed cells: submaps do not overlap the global layout")]
    NotSolvable,

    #[error(
        "degenerate geometry: reduced system is singular (smallest eigenvalue {min_eigenvalue:e})"
    )]
    Degenerate { min_eigenvalue: f64 },

    #[error("non-finite residual at iteration {iteration}")]
    NonFiniteResidual { iteration: usize },

    #[error("diverged: objective increased for {0} consecutive iterations")]
    Diverged(usize),

    #[error("memory guard exceeded: {cells} observed cells (limit {limit})")]
    MemoryGuard { cells: usize, limit: usize },

    #[error("metric undefined: {0}")]
    Metric(&'static str),
}

impl Error {
    /// Process exit code: 1 for bad input, 2 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotSolvable
            | Error::Degenerate { .. }
            | Error::NonFiniteResidual { .. }
            | Error::Diverged(_)
            | Error::MemoryGuard { .. } => 2,
            _ => 1,
        }
    }

    /// Short stable name used in CLI diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Io(_) => "io error",
            Error::NotFound { .. } => "not found",
            Error::MalformedHeader(_) => "malformed header",
            Error::SizeMismatch { .. } => "size mismatch",
            Error::NonFinite { .. } => "non-finite value",
            Error::Validation(_) => "validation error",
            Error::Format(_) => "format error",
            Error::EmptyInput(_) => "empty input",
            Error::LengthMismatch { .. } => "length mismatch",
            Error::NotSolvable => "not solvable",
            Error::Degenerate { .. } => "degenerate geometry",
            Error::NonFiniteResidual { .. } => "non-finite residual",
            Error::Diverged(_) => "diverged",
            Error::MemoryGuard { .. } => "memory guard",
            Error::Metric(_) => "metric undefined",
        }
    }
}
