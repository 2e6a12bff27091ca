use std::path::PathBuf;

use branchy_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("training diverged in stage {stage} at epoch {epoch} (loss {loss})")]
    Diverged { stage: &'static str, epoch: usize, loss: f64 },
    #[error("training stage out of order: {0}")]
    StageOrder(String),
    #[error("no strategy reaches the accuracy floor {floor:.4}")]
    Infeasible { floor: f64 },
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
