use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced at layer {layer}")]
    NumericOverflow { layer: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no viable learning rate: every run diverged")]
    NoViableLr,

    #[error("insufficient data: need at least {needed} records, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("unknown target `{given}`; valid targets: {valid}")]
    UnknownTarget { given: String, valid: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used in the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NumericOverflow { .. } => "numeric_overflow",
            Error::NonFinite(_) => "non_finite",
            Error::NoViableLr => "no_viable_lr",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::UnknownTarget { .. } => "unknown_target",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
