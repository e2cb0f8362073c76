use std::io;
use std::path::{Path, PathBuf};

use lowres_mt::autodiff::{CheckpointError, TensorError};
use lowres_mt::bpe::BpeError;
use lowres_mt::corpus::CorpusError;
use lowres_mt::distill::DistillError;
use lowres_mt::eval::EvalError;
use lowres_mt::lora::LoraError;
use lowres_mt::transformer::TransformerError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            Self::Missing(_) => 2,
            Self::Config(_) => 3,
            Self::Numeric(_) => 4,
            Self::Failed(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Missing(_) => "missing_file",
            Self::Config(_) => "config",
            Self::Numeric(_) => "numeric",
            Self::Failed(_) => "failed",
        }
    }

    pub fn io(path: &Path, e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            Self::Missing(path.to_path_buf())
        } else {
            Self::Failed(format!("{}: {e}", path.display()))
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFiniteGradient(_) => Self::Numeric(e.to_string()),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<TransformerError> for CliError {
    fn from(e: TransformerError) -> Self {
        match e {
            TransformerError::Config(_) | TransformerError::Length { .. } => Self::Config(e.to_string()),
            TransformerError::NonFinite(_) => Self::Numeric(e.to_string()),
            TransformerError::Tensor(t) => t.into(),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<LoraError> for CliError {
    fn from(e: LoraError) -> Self {
        match e {
            LoraError::Config(_) => Self::Config(e.to_string()),
            LoraError::Model(m) => m.into(),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Config(_) | DistillError::Dimension(..) => Self::Config(e.to_string()),
            DistillError::Io { ref path, source } if source.kind() == io::ErrorKind::NotFound => {
                Self::Missing(PathBuf::from(path))
            }
            DistillError::Model(m) => m.into(),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { ref path, ref source } if source.kind() == io::ErrorKind::NotFound => {
                Self::Missing(PathBuf::from(path))
            }
            CorpusError::Config(_) => Self::Config(e.to_string()),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Failed(e.to_string())
    }
}

impl From<BpeError> for CliError {
    fn from(e: BpeError) -> Self {
        Self::Failed(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::Failed(e.to_string())
    }
}
