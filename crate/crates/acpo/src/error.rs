//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

/// All fallible operations in this crate return this error.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape mismatch; names both offending shapes.
    #[error("shape mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    Shape {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// Index outside the valid range for a tensor axis or vocabulary.
    #[error("index {index} out of range (limit {limit}) in {op}")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },

    /// Invalid caller-supplied input (empty frame list, wrong prompt head, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Invalid configuration or usage.
    #[error("config error: {0}")]
    Config(String),

    /// Missing or inconsistent data (unknown clip id, empty pair pool, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical abort (NaN loss, digest mismatch on load).
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 usage/config, 3 data, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
