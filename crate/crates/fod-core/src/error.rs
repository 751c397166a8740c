//! Error type shared across the crate.
//!
//! Variants map onto the failure categories surfaced by the CLI exit codes:
//! invalid arguments, file-format violations (with byte offsets), I/O,
//! configuration problems, numeric failures, and internal contract breaks.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, FodError>;

#[derive(Debug, thiserror::Error)]
pub enum FodError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed container or manifest bytes; `offset` points at the first
    /// byte that failed validation.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("version mismatch: found {found}, supported {supported}")]
    VersionMismatch { found: u16, supported: u16 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl FodError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        FodError::InvalidArgument(msg.into())
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        FodError::Format {
            offset,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FodError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable category name used by the CLI to pick an exit code.
    pub fn category(&self) -> &'static str {
        match self {
            FodError::InvalidArgument(_) => "invalid-argument",
            FodError::Format { .. } | FodError::VersionMismatch { .. } => "format",
            FodError::Io { .. } => "io",
            FodError::Config(_) => "config",
            FodError::Numeric(_) => "numeric",
            FodError::Internal(_) => "internal",
        }
    }
}
