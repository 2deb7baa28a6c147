use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header field `{field}`: {reason}")]
    MalformedHeader { field: &'static str, reason: String },

    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in `{field}` at flat index {index}")]
    NonFinite { field: &'static str, index: usize },

    #[error("label out of range: `labels[{index}]` = {label}, class count is {classes}")]
    LabelOutOfRange {
        index: usize,
        label: u64,
        classes: usize,
    },

    #[error("`class_counts[{class}]` mismatch: stored {stored}, recomputed {recomputed}")]
    CountMismatch {
        class: usize,
        stored: u64,
        recomputed: u64,
    },

    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("class {class} has sampling probability {prob} but no samples")]
    EmptyClass { class: usize, prob: f64 },

    #[error("batch of {0} samples is too small for refinement (need at least 2)")]
    BatchTooSmall(usize),

    #[error("sidecar metadata: {0}")]
    Sidecar(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable identifier, printed on stderr by the CLI.
    pub fn id(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedHeader { .. } => "malformed_header",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::Invalid { .. } => "invalid_value",
            Error::EmptyClass { .. } => "empty_class",
            Error::BatchTooSmall(_) => "batch_too_small",
            Error::Sidecar(_) => "sidecar",
            Error::ConfigParse(_) => "config_parse",
        }
    }
}
