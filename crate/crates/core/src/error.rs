use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("operation `{0}` is not differentiable")]
    Unsupported(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("bad magic bytes: not a snapshot container")]
    BadMagic,

    #[error("unsupported container version {0} (expected 1)")]
    UnsupportedVersion(u32),

    #[error("unknown record kind {0:?}")]
    UnknownKind([u8; 4]),

    #[error("malformed container at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("truncated container: expected {needed} more bytes at byte offset {offset}")]
    Truncated { offset: u64, needed: u64 },

    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures of the numbers themselves (NaN, divergence), as
    /// opposed to bad input or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Divergence { .. })
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::BadMagic
                | Error::UnsupportedVersion(_)
                | Error::UnknownKind(_)
                | Error::Format { .. }
                | Error::Truncated { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
