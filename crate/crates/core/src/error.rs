//! Error type shared by every module in the crate.

/// Crate-wide error enum. Variants map one-to-one onto the failure classes
/// the public operations document (invalid-argument, conflict, not-found,
/// schema-invalid, backend failures, store corruption).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Backend returned a payload that does not parse as the expected wire
    /// schema even after the repair pass. Carries the raw payload for
    /// diagnosis.
    #[error("schema invalid: {reason}")]
    SchemaInvalid { reason: String, raw: String },

    #[error("unsupported schema version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// Transient backend failure; callers may retry.
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("backend authentication failed: {0}")]
    BackendAuth(String),

    /// The mock backend was asked for a response it has no fixture for.
    /// Names the missing key; the mock never fabricates output.
    #[error("fixture miss: {0}")]
    FixtureMiss(String),

    #[error("context overflow: ~{estimated_tokens} tokens exceeds the backend limit of {limit_tokens}; {hint}")]
    ContextOverflow {
        estimated_tokens: usize,
        limit_tokens: usize,
        hint: String,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures where retrying the same call can succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::BackendUnavailable(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
