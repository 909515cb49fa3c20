// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while probing, steering or reading files.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    /// An argument or input value violates a precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// The ridge system could not be factorized at `lambda = 0`.
    #[error("singular design: X^T X is not invertible (lambda = 0)")]
    SingularDesign,

    /// A correlation was requested on an input with no variance.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// A numeric procedure diverged or produced non-finite output.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A binary file is malformed at a known byte offset.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse {
        /// Byte offset where parsing failed.
        offset: u64,
        /// What was expected there.
        message: String,
    },

    /// A text file (bank, label table, prompt file) is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// A file declares a format version this build does not read.
    #[error("unsupported format version: file has {found}, this build reads {expected}")]
    VersionMismatch {
        /// Version stored in the file.
        found: u32,
        /// Version this build supports.
        expected: u32,
    },

    /// A file parsed, but its content is not usable (e.g. NaN activations).
    #[error("data error: {0}")]
    Data(String),

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// Path being read or written.
        path: PathBuf,
        /// OS error.
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse error class, used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Validation(_) => ErrorClass::Validation,
            Error::Parse { .. }
            | Error::Format(_)
            | Error::VersionMismatch { .. }
            | Error::Data(_) => ErrorClass::Parse,
            Error::SingularDesign | Error::UndefinedCorrelation(_) | Error::Numeric(_) => {
                ErrorClass::Numeric
            }
            Error::Io { .. } => ErrorClass::Io,
        }
    }
}

/// Error classes with stable process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments or inputs.
    Validation,
    /// Malformed or unreadable file content.
    Parse,
    /// Numerical failure.
    Numeric,
    /// Filesystem failure.
    Io,
}

impl ErrorClass {
    /// Process exit code for this class.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Io => 1,
            ErrorClass::Validation => 2,
            ErrorClass::Parse => 3,
            ErrorClass::Numeric => 4,
        }
    }
}
