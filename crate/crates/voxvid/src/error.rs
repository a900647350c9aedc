//! Companion-crate error type with the CLI's machine-parsable categories.

use thiserror::Error;
use voxvid_core::CoreError;

#[derive(Debug, Error)]
pub enum VoxvidError {
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("bad bitstream: {0}")]
    Bitstream(String),
    #[error("bad dataset: {0}")]
    Dataset(String),
    #[error("usage: {0}")]
    Usage(String),
}

impl VoxvidError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        VoxvidError::Io { path: path.into(), source }
    }

    /// Stable single-word category for the CLI's error line.
    pub fn category(&self) -> &'static str {
        match self {
            VoxvidError::Core(CoreError::Diverged { .. }) => "diverged",
            VoxvidError::Core(CoreError::CorruptStream(_)) => "bitstream",
            VoxvidError::Core(_) => "compute",
            VoxvidError::Io { .. } => "io",
            VoxvidError::Config(_) => "config",
            VoxvidError::Bitstream(_) => "bitstream",
            VoxvidError::Dataset(_) => "dataset",
            VoxvidError::Usage(_) => "usage",
        }
    }
}

pub type Result<T> = std::result::Result<T, VoxvidError>;
