use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("linearization failed: {0}")]
    Linearization(String),
    #[error("spawn failed after {0} rejection rounds")]
    Spawn(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("log format error: {0}")]
    LogFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
