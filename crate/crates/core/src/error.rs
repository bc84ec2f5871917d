use thiserror::Error;

use crate::model::Dimension;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Each variant maps to one stable machine code via [`Error::code`]; the HTTP
/// service and the CLI both surface that code verbatim.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown category {name:?} for dimension {dimension}")]
    UnknownCategory { dimension: Dimension, name: String },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("backend {backend} unavailable for dimension {dimension}")]
    BackendUnavailable { dimension: Dimension, backend: String },
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("degenerate labels: only one class ({0}) present")]
    DegenerateLabels(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("expected exactly {expected} labeled examples, got {actual}")]
    WrongExampleCount { expected: usize, actual: usize },
    #[error("model format mismatch: {0}")]
    ModelMismatch(String),
    #[error("invalid annotation matrix: {0}")]
    InvalidMatrix(String),
    #[error("degenerate agreement: expected agreement saturates at 1")]
    DegenerateAgreement,
    #[error("sample size {requested} exceeds dataset size {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("suggestion {0} is stale: the prompt text changed since it was produced")]
    StaleSuggestion(String),
    #[error("suggestion {0} is already resolved")]
    AlreadyResolved(String),
    #[error("missing binding for variable {0:?}")]
    MissingVariable(String),
    #[error("binding supplies unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("invalid binding for {name:?}: {reason}")]
    InvalidBinding { name: String, reason: String },
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("prompts share no common token skeleton")]
    NoCommonSkeleton,
    #[error("gateway unavailable: {0}")]
    GatewayUnavailable(String),
    #[error("invalid gateway response: {0}")]
    InvalidResponse(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("{kind} {id} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("prompt text must not be empty")]
    EmptyText,
    #[error("unsupported schema version {0}")]
    UnsupportedSchemaVersion(u64),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnknownCategory { .. } => "unknown_category",
            Error::InvalidVocabulary(_) => "invalid_vocabulary",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::BackendUnavailable { .. } => "backend_unavailable",
            Error::InsufficientData(_) => "insufficient_data",
            Error::DegenerateLabels(_) => "degenerate_labels",
            Error::EmptyDataset => "empty_dataset",
            Error::WrongExampleCount { .. } => "wrong_example_count",
            Error::ModelMismatch(_) => "model_mismatch",
            Error::InvalidMatrix(_) => "invalid_matrix",
            Error::DegenerateAgreement => "degenerate_agreement",
            Error::SampleTooLarge { .. } => "sample_too_large",
            Error::StaleSuggestion(_) => "stale_suggestion",
            Error::AlreadyResolved(_) => "already_resolved",
            Error::MissingVariable(_) => "missing_variable",
            Error::UnknownVariable(_) => "unknown_variable",
            Error::InvalidBinding { .. } => "invalid_binding",
            Error::InvalidTemplate(_) => "invalid_template",
            Error::NoCommonSkeleton => "no_common_skeleton",
            Error::GatewayUnavailable(_) => "gateway_unavailable",
            Error::InvalidResponse(_) => "invalid_response",
            Error::MissingCredential(_) => "missing_credential",
            Error::NotFound { .. } => "not_found",
            Error::EmptyText => "empty_text",
            Error::UnsupportedSchemaVersion(_) => "unsupported_schema_version",
            Error::Parse { .. } => "parse_error",
            Error::Io(_) => "io_error",
        }
    }

    pub(crate) fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        Error::NotFound { kind, id: id.into() }
    }

    pub(crate) fn from_json(err: &serde_json::Error) -> Self {
        Error::Parse {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}
