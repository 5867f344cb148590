use thiserror::Error;

/// Errors raised by the simulator and its toolkits.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or malformed configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Operand shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Non-finite or otherwise unusable numeric input.
    #[error("invalid input: {0}")]
    Input(String),

    /// Channel Gram matrix is singular or too badly conditioned for zero forcing.
    #[error("degenerate channel: condition number {condition:.3e} exceeds limit")]
    DegenerateChannel { condition: f64 },

    /// Least-squares identification could not determine all coefficients.
    #[error("identification failed: {0}")]
    Identification(String),

    /// Training produced a non-finite value or ran away.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Malformed data or checkpoint file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateChannel { .. } | Error::Identification(_) | Error::Divergence(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
