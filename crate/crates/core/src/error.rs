use thiserror::Error;

/// Errors raised by the library. Variants map onto the CLI exit codes:
/// `InvalidInput` is a configuration error, everything else is a runtime
/// failure.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum QamError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("p={p} and q={q} are not coprime")]
    NotCoprime { p: i64, q: i64 },
    #[error("beta={beta} is not a resonant quasi-momentum for p={p}, q={q}")]
    NotResonant { p: i64, q: i64, beta: String },
    #[error("degenerate map: {0}")]
    Degenerate(String),
    #[error("basis window exhausted: {0}")]
    Truncation(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for QamError {
    fn from(e: std::io::Error) -> Self {
        QamError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, QamError>;

pub(crate) fn ensure_finite(name: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(QamError::InvalidInput(format!("{name} must be finite, got {x}")))
    }
}
