use thiserror::Error;

/// Errors raised by the simulator and its building blocks.
///
/// The variants are coarse on purpose: the command-line harness maps each one
/// onto a stable exit code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid experiment or model configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Missing, empty or inconsistent data.
    #[error("data error: {0}")]
    Data(String),
    /// Malformed binary input (IDX files, payload dumps).
    #[error("format error: {0}")]
    Format(String),
    /// Caller broke an operation precondition (shape or length mismatch).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Argument outside the mathematical domain of a formula.
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_len(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{what}: expected length {expected}, got {actual}"
        )))
    }
}
