use std::path::PathBuf;

use crate::ids::{ItemId, UserId};
use crate::sampling::KsReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: item `{item}` is not in the catalog")]
    UnknownItem {
        path: String,
        line: usize,
        item: ItemId,
    },

    #[error("log is empty after {k}-core filtering")]
    EmptyAfterFiltering { k: usize },

    #[error("user `{user}` has {count} interactions; leave-one-out needs at least 3")]
    TooFewInteractions { user: UserId, count: usize },

    #[error("user `{user}`: {eligible} eligible negatives, {needed} requested")]
    InsufficientNegatives {
        user: UserId,
        eligible: usize,
        needed: usize,
    },

    #[error("user `{0}` is not covered by any run file")]
    UserNotInRuns(UserId),

    #[error("user `{0}` is missing from the reference scores")]
    MissingReference(UserId),

    #[error("sample rejected by the K-S gate after {} attempts (D = {:.4}, p = {:.4})", .0.attempts, .0.statistic, .0.p_value)]
    GateExhausted(KsReport),

    #[error("position {position} is out of range for a pool of {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("pool for user `{0}` does not contain its positive item")]
    PositiveAbsent(UserId),

    #[error("strategy `{strategy}` {problem}")]
    StrategyMismatch {
        strategy: &'static str,
        problem: &'static str,
    },

    #[error("user `{0}` has an empty history")]
    EmptyHistory(UserId),

    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },

    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },

    #[error("endpoint returned an empty completion")]
    EmptyCompletion,

    #[error("environment variable `{0}` is not set")]
    MissingApiKey(String),

    #[error("missing artifact {path} (run `{stage}` first)")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }

    /// True for failures that originate outside this process (network, provider).
    pub fn is_upstream(&self) -> bool {
        matches!(
            self,
            Error::Transport { .. } | Error::Http { .. } | Error::EmptyCompletion | Error::MissingApiKey(_)
        )
    }
}
