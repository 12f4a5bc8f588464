use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes cannot be reconciled.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    /// A call violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// Model or run configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// Division by a value too close to zero to be represented safely.
    #[error("division by near-zero value {0:e} in {1}")]
    NearZeroDivisor(f64, &'static str),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
