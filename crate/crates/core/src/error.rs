use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    /// `row` is the 1-based data row (header excluded).
    #[error("unparseable timestamp `{value}` at row {row}")]
    UnparseableTimestamp { row: usize, value: String },
    #[error("event log is empty")]
    EmptyLog,
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("event {event_index} lacks mandatory attribute `{key}`")]
    MissingMandatoryAttribute { event_index: usize, key: String },
    #[error("invalid event log: {0}")]
    InvalidLog(String),
    #[error("trace `{case_id}` has {len} events, at least {min} required")]
    TraceTooShort { case_id: String, len: usize, min: usize },
    #[error("too few cases: {0}")]
    TooFewCases(String),
    #[error("degenerate statistic: {0}")]
    DegenerateStat(String),
    #[error("schema version mismatch: expected `{expected}`, found `{found}`")]
    SchemaVersionMismatch { expected: String, found: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite model output")]
    NonFiniteOutput,
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value in optimizer state for `{0}`")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("prefix of length {0} is too short, at least 2 events required")]
    PrefixTooShort(usize),
    #[error("length mismatch: {left} predictions for {right} records")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used by front-ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    /// Stable, machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingColumn(_) => "MissingColumn",
            Error::UnparseableTimestamp { .. } => "UnparseableTimestamp",
            Error::EmptyLog => "EmptyLog",
            Error::MalformedXml(_) => "MalformedXml",
            Error::MissingMandatoryAttribute { .. } => "MissingMandatoryAttribute",
            Error::InvalidLog(_) => "InvalidLog",
            Error::TraceTooShort { .. } => "TraceTooShort",
            Error::TooFewCases(_) => "TooFewCases",
            Error::DegenerateStat(_) => "DegenerateStat",
            Error::SchemaVersionMismatch { .. } => "SchemaVersionMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFiniteOutput => "NonFiniteOutput",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::NonFinite(_) => "NonFinite",
            Error::Diverged { .. } => "Diverged",
            Error::PrefixTooShort(_) => "PrefixTooShort",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::Config(_) => "Config",
            Error::Format(_) => "Format",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFiniteOutput
            | Error::NonFiniteGradient(_)
            | Error::NonFinite(_)
            | Error::Diverged { .. } => ErrorClass::Numeric,
            Error::Config(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}
