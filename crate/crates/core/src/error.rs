use thiserror::Error;

/// Errors produced by the generation pipeline and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("schedule order violation: t_prev {t_prev} must be smaller than t {t}")]
    ScheduleOrder { t: usize, t_prev: usize },

    #[error("timestep {0} is out of range for this schedule")]
    TimestepOutOfRange(usize),

    #[error("unknown prompt key {0:?}: no mean registered for it on this backend")]
    UnknownPromptKey(String),

    #[error("backend {backend} does not support attention biasing")]
    UnsupportedBias { backend: &'static str },

    #[error("backend is unavailable: {0}")]
    BackendUnavailable(String),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("prompt has no anomaly tokens: normal and anomaly prompts tokenize identically")]
    NoAnomalyTokens,

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("token index {index} out of range for {len} tokens")]
    TokenIndexOutOfRange { index: usize, len: usize },

    #[error("negative entries are not allowed in {0}")]
    NegativeEntries(&'static str),

    #[error("foreground provider failed: {0}")]
    ForegroundProvider(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    /// Stable machine-readable tag for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::ScheduleOrder { .. } => "schedule_order",
            Error::TimestepOutOfRange(_) => "timestep_out_of_range",
            Error::UnknownPromptKey(_) => "unknown_prompt_key",
            Error::UnsupportedBias { .. } => "unsupported_bias",
            Error::BackendUnavailable(_) => "backend_unavailable",
            Error::EmptyPrompt => "empty_prompt",
            Error::NoAnomalyTokens => "no_anomaly_tokens",
            Error::DegenerateEmbedding(_) => "degenerate_embedding",
            Error::TokenIndexOutOfRange { .. } => "token_index_out_of_range",
            Error::NegativeEntries(_) => "negative_entries",
            Error::ForegroundProvider(_) => "foreground_provider",
            Error::Artifact(_) => "artifact",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
