use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    Numeric { op: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset} ({field}): {detail}")]
    Format {
        offset: usize,
        field: &'static str,
        detail: String,
    },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category, used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Numeric { .. } => "numeric",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Checksum { .. } => "checksum",
            Error::Version { .. } => "version",
            Error::MissingTensor(_) => "missing-tensor",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
