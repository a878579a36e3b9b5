use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("rollout diverged at step {step}: {detail}")]
    Rollout { step: usize, detail: String },
    #[error("training failed at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },
    #[error("optimizer error: {0}")]
    Optimizer(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("instance too large: {0}")]
    Size(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
