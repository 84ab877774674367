use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("not a permutation of 0..{len}: {detail}")]
    InvalidPermutation { len: usize, detail: String },

    #[error("mask entry ({row},{col}) = {value} lies inside the rounding band around 0.5")]
    RoundingAmbiguous { row: usize, col: usize, value: f64 },

    #[error("rounded mask is not the mask of any permutation: {0}")]
    NotPermutationMask(String),

    #[error("restricted Gram matrix is singular (task {task}, column {column})")]
    RankDeficient { task: usize, column: usize },

    #[error("objective became non-finite at outer iteration {outer}, inner iteration {inner}; try a smaller step size")]
    NonFinite { outer: usize, inner: usize },

    #[error("exhaustive search limited to p <= {max_p}, got p = {p}")]
    DimensionTooLarge { p: usize, max_p: usize },

    #[error("weights of task {task} are inconsistent with the order at ({row},{col})")]
    InconsistentStack { task: usize, row: usize, col: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            msg: err.to_string(),
        }
    }

    /// True for failures of the numerical procedures, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::RoundingAmbiguous { .. }
                | Error::NotPermutationMask(_)
                | Error::RankDeficient { .. }
                | Error::NonFinite { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
