use spherewarp_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("optimisation diverged after {} iterations", trace.len())]
    Divergence { trace: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, RegError>;
