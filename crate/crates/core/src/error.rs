//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by fractal generation, rendering, and gradient code.
#[derive(Debug, Error)]
pub enum Error {
    /// Every transform in the system has a zero singular-value product, so
    /// selection probabilities are undefined.
    #[error("degenerate system: all transforms have sigma1*sigma2 == 0")]
    DegenerateSystem,

    /// A trajectory coordinate became NaN or infinite during iteration.
    #[error("non-finite trajectory coordinate at iteration {iteration}")]
    NonFiniteTrajectory { iteration: usize },

    /// A point handed to the renderer is NaN or infinite.
    #[error("non-finite point coordinate at index {index}")]
    NonFinitePoint { index: usize },

    /// A gradient accumulator became NaN or infinite.
    #[error("non-finite gradient ({context})")]
    NonFiniteGradient { context: String },

    /// Two grids that must agree in shape do not.
    #[error("shape mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    ShapeMismatch {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },

    /// The file is not in a format this crate can read.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    /// The file claims a supported format but its contents are malformed.
    #[error("corrupt file: {0}")]
    CorruptFile(String),

    /// A configuration value is outside its documented range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
