use crossdtr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate projection: point lies on the principal plane (|d| = {0:e})")]
    DegenerateProjection(f64),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("depth {depth} outside [{d_min}, {d_max}]")]
    DepthOutOfRange { depth: f64, d_min: f64, d_max: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("version error: {0}")]
    Version(String),
    #[error("non-finite loss at iteration {iteration} (scene seeds {seeds:?})")]
    NonFiniteLoss { iteration: usize, seeds: Vec<u64> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
