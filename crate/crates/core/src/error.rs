use thiserror::Error;

/// Errors raised by the reconstruction toolkit.
#[derive(Debug, Error)]
pub enum NlctfError {
    /// Shapes of operands do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value violates a documented invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numerical routine failed (non-convergence, non-finite values, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A file could not be parsed.
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NlctfError {
    /// Prefix the message with extra context, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Self::Dimension(m) => Self::Dimension(format!("{ctx}: {m}")),
            Self::Config(m) => Self::Config(format!("{ctx}: {m}")),
            Self::Numeric(m) => Self::Numeric(format!("{ctx}: {m}")),
            Self::Format { path, reason } => Self::Format {
                path,
                reason: format!("{ctx}: {reason}"),
            },
            Self::Io(e) => Self::Io(std::io::Error::new(e.kind(), format!("{ctx}: {e}"))),
        }
    }
}

pub type Result<T> = std::result::Result<T, NlctfError>;
