use surgisim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error(transparent)]
    Sim(#[from] SimError),

    #[error("non-finite {what} in update; parameters left unchanged")]
    NonFiniteUpdate { what: &'static str },

    #[error("invalid training configuration: {0}")]
    Config(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RlError>;
