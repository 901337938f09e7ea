use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LudError>;

#[derive(Debug, Error)]
pub enum LudError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty alphabet: no symbols to build a vocabulary from")]
    EmptyAlphabet,

    #[error("symbol {symbol:?} is not in the vocabulary")]
    OutOfVocabulary { symbol: String },

    #[error("token id {0} is outside the vocabulary")]
    UnknownTokenId(u32),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("checkpoint mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid checkpoint {path}: {message}")]
    BadCheckpoint { path: PathBuf, message: String },

    #[error("missing {artifact} at {path}; run `lud {command}` first")]
    MissingArtifact {
        artifact: &'static str,
        path: PathBuf,
        command: &'static str,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl LudError {
    /// Stable snake_case name of the variant, used in service error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            LudError::InvalidArgument(_) => "invalid_argument",
            LudError::EmptyAlphabet => "empty_alphabet",
            LudError::OutOfVocabulary { .. } => "out_of_vocabulary",
            LudError::UnknownTokenId(_) => "unknown_token_id",
            LudError::SequenceTooLong { .. } => "sequence_too_long",
            LudError::Malformed { .. } => "malformed",
            LudError::NonFiniteLoss { .. } => "non_finite_loss",
            LudError::ConfigMismatch(_) => "config_mismatch",
            LudError::BadCheckpoint { .. } => "bad_checkpoint",
            LudError::MissingArtifact { .. } => "missing_artifact",
            LudError::Invariant(_) => "invariant",
            LudError::Io { .. } => "io",
            LudError::Json(_) => "json",
            LudError::Config(_) => "config",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LudError::Io {
            path: path.into(),
            source,
        }
    }
}
