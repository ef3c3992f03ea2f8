use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dim(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Tensor(#[from] tempotrack_tensor::TensorError),

    #[error(transparent)]
    Box(#[from] crate::boxes::BoxError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("load error in {path}: {reason}")]
    Load { path: String, reason: String },

    #[error("training aborted: {0}")]
    Train(String),
}

impl ModelError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ModelError::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
