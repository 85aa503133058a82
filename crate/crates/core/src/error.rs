use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty ranking")]
    EmptyRanking,

    #[error("empty segment")]
    EmptySegment,

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checklist pair `{pair_id}` is missing question `{qid}`")]
    MissingPairMember { pair_id: String, qid: String },

    #[error("feature schema mismatch, missing: {}", missing.join(", "))]
    SchemaMismatch { missing: Vec<String> },

    #[error("model has not been fitted")]
    NotFitted,

    #[error("no frontier point reaches utility target {target} (max achievable {max_utility})")]
    Infeasible { target: f64, max_utility: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("format `{kind}` version {found} is not supported (expected {expected})")]
    VersionMismatch {
        kind: String,
        expected: u32,
        found: u32,
    },

    #[error("checksum mismatch: payload is corrupted")]
    Checksum,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
