use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate box: w={w}, h={h} (both must be positive)")]
    DegenerateBox { w: f64, h: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("rejected instance: {0}")]
    RejectedInstance(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dataset load error: {0}")]
    DataLoad(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
