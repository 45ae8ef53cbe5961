use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("scene generation failed: {0}")]
    SceneGeneration(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error("infeasible geometry: {0}")]
    Infeasible(String),
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("dump format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
