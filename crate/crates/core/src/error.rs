use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("field must be mean-zero")]
    NotMeanZero,
    #[error("Fourier symbol not positive at mode {mode:?} (value {value})")]
    NotPositive { mode: Vec<usize>, value: f64 },
    #[error("layer {k} fails positivity: min spectral value {min}")]
    LayerNotPositive { k: u32, min: f64 },
    #[error("missing table entry for polymer {0}")]
    MissingEntry(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("sequence length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("volume {volume} exceeds limit {limit}")]
    TooLarge { volume: usize, limit: usize },
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
