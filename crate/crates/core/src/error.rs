use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sequence of length {len} exceeds max_seq {max}")]
    ExceedsMaxSeq { len: usize, max: usize },

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("drafted token with zero draft probability (token {0})")]
    ZeroDraftProbability(usize),

    #[error("window at position {position} with draft length {draft_len} overflows trace of length {len}")]
    WindowOverflow {
        position: usize,
        draft_len: usize,
        len: usize,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("table nonempty required")]
    EmptyTable,

    #[error("count >= 1 required")]
    InvalidCount,

    #[error("snapshot format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
