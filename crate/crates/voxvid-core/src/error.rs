//! Crate error type.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A sampled point lies outside the grid's bounding box.
    OutOfBounds,
    /// A pixel coordinate lies outside the camera image.
    PixelOutOfBounds { row: u32, col: u32 },
    /// Structural misconfiguration (dimensions, channel counts, ranges).
    InvalidConfig(String),
    /// A computation produced NaN/Inf where finite values are required.
    NonFinite(&'static str),
    /// Training aborted on a non-finite loss.
    Diverged { iteration: usize },
    /// A value to be coded lies outside the coder alphabet.
    SymbolOutOfAlphabet(i64),
    /// The byte stream cannot be decoded.
    CorruptStream(&'static str),
    /// A P-frame was decoded or trained without the previous frame available.
    MissingReference,
    /// An internal invariant failed (a bug, not a user error).
    Internal(&'static str),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::OutOfBounds => write!(f, "query point outside grid bounds"),
            CoreError::PixelOutOfBounds { row, col } => {
                write!(f, "pixel ({row}, {col}) outside image bounds")
            }
            CoreError::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            CoreError::NonFinite(what) => write!(f, "non-finite value in {what}"),
            CoreError::Diverged { iteration } => {
                write!(f, "training diverged at iteration {iteration}")
            }
            CoreError::SymbolOutOfAlphabet(v) => {
                write!(f, "value {v} outside coder alphabet")
            }
            CoreError::CorruptStream(what) => write!(f, "corrupt stream: {what}"),
            CoreError::MissingReference => {
                write!(f, "previous frame required but not available")
            }
            CoreError::Internal(what) => write!(f, "internal invariant violated: {what}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
