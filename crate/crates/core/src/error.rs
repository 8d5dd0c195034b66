use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("duplicate document id `{0}`")]
    DuplicateId(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid prompt template: {0}")]
    Template(String),

    #[error("invalid verbalizer: {0}")]
    Verbalizer(String),

    #[error("backend does not support {0}")]
    Unsupported(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    #[error("prompt needs {prompt_tokens} tokens but the context holds {context_size}")]
    ContextOverflow {
        prompt_tokens: usize,
        context_size: usize,
    },

    #[error("surface(s) absent from the backend vocabulary: {0:?}")]
    AbsentSurfaces(Vec<String>),

    #[error("reply is not a number in [-1, 1] after {attempts} attempt(s): {raw:?}")]
    ReplyFormat { attempts: usize, raw: String },

    #[error("label distribution has zero total mass; cannot renormalize")]
    DegenerateDistribution,

    #[error("label `{0}` missing from distribution")]
    MissingLabel(String),

    #[error("gold label `{0}` is not among the verbalizer labels")]
    UnknownGoldLabel(String),

    #[error("design matrix is rank deficient; collinear column(s): {0:?}")]
    RankDeficient(Vec<String>),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("outcome is constant; nothing to learn")]
    ConstantOutcome,

    #[error("no row is out-of-bag for any tree")]
    NoOobCoverage,

    #[error("{0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedRecord { .. } => "malformed_record",
            Error::DuplicateId(_) => "duplicate_id",
            Error::InvalidInput(_) => "invalid_input",
            Error::Template(_) => "template",
            Error::Verbalizer(_) => "verbalizer",
            Error::Unsupported(_) => "unsupported",
            Error::Transport { .. } => "transport",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::AbsentSurfaces(_) => "absent_surfaces",
            Error::ReplyFormat { .. } => "reply_format",
            Error::DegenerateDistribution => "degenerate_distribution",
            Error::MissingLabel(_) => "missing_label",
            Error::UnknownGoldLabel(_) => "unknown_gold_label",
            Error::RankDeficient(_) => "rank_deficient",
            Error::UnknownColumn(_) => "unknown_column",
            Error::UnknownFeature(_) => "unknown_feature",
            Error::ConstantOutcome => "constant_outcome",
            Error::NoOobCoverage => "no_oob_coverage",
            Error::Serialization(_) => "serialization",
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(format!("json: {e}"))
    }
}
