//! Error taxonomy shared across the workspace.
//!
//! Errors are categorized so the CLI can map each class onto a distinct
//! nonzero exit code.

/// All failure modes surfaced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid domain inputs (attribute out of range, unknown action, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation precondition (shape, range, count).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values or other numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training diverged; carries the step index at which it happened.
    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },

    /// Preference-dataset construction failed.
    #[error("build error: {0}")]
    Build(String),

    /// A persisted artifact failed its integrity check.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A pipeline stage requires an upstream artifact that does not exist.
    #[error("missing upstream stage: {0}")]
    MissingStage(String),

    /// An upstream artifact exists but was produced under a different config.
    #[error("stale artifact: {0}")]
    Stale(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Serialization / deserialization failure.
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Stable category name, used in CLI error reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Training { .. } => "training",
            Error::Build(_) => "build",
            Error::Integrity(_) => "integrity",
            Error::MissingStage(_) => "missing-stage",
            Error::Stale(_) => "stale",
            Error::Io(_) => "io",
            Error::Serde(_) => "serde",
        }
    }

    /// Exit code for the CLI: one code per category, all nonzero.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_) => 2,
            Error::Config(_) => 3,
            Error::Contract(_) => 4,
            Error::Numeric(_) => 5,
            Error::Training { .. } => 6,
            Error::Build(_) => 7,
            Error::Integrity(_) => 8,
            Error::MissingStage(_) => 9,
            Error::Stale(_) => 10,
            Error::Io(_) => 11,
            Error::Serde(_) => 12,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
