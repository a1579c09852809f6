use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("codebook mismatch: image uses `{image}`, codebook is `{codebook}`")]
    CodebookMismatch { image: String, codebook: String },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("image {width}x{height} is not a multiple of patch side {patch}")]
    NotPatchAligned {
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image too small: {0}")]
    ImageTooSmall(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("unknown template `{0}` (expected `movies` or `videos`)")]
    UnknownTemplate(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("provider missing: {0}")]
    ProviderMissing(String),
    #[error("metric table is missing rows: {0}")]
    MissingRows(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("log-probability mismatch with recorded rollout: {0}")]
    LogprobMismatch(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
