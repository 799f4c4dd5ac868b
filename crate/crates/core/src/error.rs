use thiserror::Error;

#[derive(Debug, Error)]
pub enum IfusionError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: {0} became non-finite at epoch {1}")]
    Diverged(String, usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl IfusionError {
    /// Short stable identifier for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            IfusionError::Config(_) => "config",
            IfusionError::Data(_) => "data",
            IfusionError::Shape(_) => "shape",
            IfusionError::Diverged(..) => "diverged",
            IfusionError::Checkpoint(_) => "checkpoint",
            IfusionError::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        IfusionError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, IfusionError>;
