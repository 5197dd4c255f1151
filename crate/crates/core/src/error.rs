use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: feature vector has zero norm")]
    ZeroNorm { row: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("row {row}: label {label} is out of range for {classes} classes")]
    LabelOutOfRange { row: usize, label: u32, classes: u32 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("size mismatch at byte {offset}: expected {expected}, found {actual}")]
    SizeMismatch {
        offset: u64,
        expected: u64,
        actual: u64,
    },

    #[error("no example with id {0}")]
    UnknownExample(u64),

    #[error("store has {available} examples, need at least {needed}")]
    NotEnoughExamples { available: usize, needed: usize },

    #[error("infeasible generator settings: {0}")]
    Infeasible(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroNorm { .. } => "zero_norm",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::BadMagic { .. } => "bad_magic",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::UnknownExample(_) => "unknown_example",
            Error::NotEnoughExamples { .. } => "not_enough_examples",
            Error::Infeasible(_) => "infeasible",
            Error::Empty(_) => "empty",
            Error::Invariant(_) => "invariant_violation",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
