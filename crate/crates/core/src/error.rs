use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown probe `{0}`; register it with an explicit probe type")]
    UnknownProbe(String),

    #[error("probe `{name}` is catalogued as {catalog} but the manifest declares {declared}")]
    ProbeTypeMismatch {
        name: String,
        catalog: String,
        declared: String,
    },

    #[error("schema `{0}` is already mixed")]
    AlreadyMixed(String),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("{}:{line}: {message}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}:{line}: schema mismatch: {message}", path.display())]
    SchemaMismatch {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}:{line}: duplicate sample_id `{sample_id}`", path.display())]
    DuplicateSample {
        path: PathBuf,
        line: usize,
        sample_id: String,
    },

    #[error("{}:{line}: non-finite logit at index {index}", path.display())]
    NonFiniteLogit {
        path: PathBuf,
        line: usize,
        index: usize,
    },

    #[error("sample `{0}` has no boxes")]
    EmptyBoxes(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("class `{0}` has no samples")]
    EmptyClass(String),

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("class `{class}` has {count} samples; more than {required} are needed")]
    InsufficientClass {
        class: String,
        count: usize,
        required: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-friendly name of the variant, used in diagnostics listings.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownProbe(_) => "UnknownProbe",
            Error::ProbeTypeMismatch { .. } => "ProbeTypeMismatch",
            Error::AlreadyMixed(_) => "AlreadyMixed",
            Error::InvalidSchema(_) => "InvalidSchema",
            Error::InvalidManifest(_) => "InvalidManifest",
            Error::Format { .. } => "FormatError",
            Error::SchemaMismatch { .. } => "SchemaMismatch",
            Error::DuplicateSample { .. } => "DuplicateSample",
            Error::NonFiniteLogit { .. } => "NonFiniteLogit",
            Error::EmptyBoxes(_) => "EmptyBoxes",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::EmptyDataset => "EmptyDataset",
            Error::UnknownClass(_) => "UnknownClass",
            Error::EmptyClass(_) => "EmptyClass",
            Error::EmptyGroup(_) => "EmptyGroup",
            Error::KeyMismatch(_) => "KeyMismatch",
            Error::InsufficientClass { .. } => "InsufficientClass",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io { .. } => "IoError",
        }
    }
}
