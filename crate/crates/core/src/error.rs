use std::path::PathBuf;

use sts_nn::CheckpointError;

pub type Result<T, E = StsError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum StsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("array file {path}: {msg}")]
    ArrayFile { path: PathBuf, msg: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<StsError>,
    },
}

impl StsError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::InvalidArgument(_) => "invalid_argument",
            Self::ShapeMismatch { .. } => "shape_mismatch",
            Self::NonFinite(_) => "non_finite",
            Self::Diverged(_) => "diverged",
            Self::Provenance(_) => "provenance",
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::ArrayFile { .. } => "array_file",
            Self::Checkpoint(_) => "checkpoint",
            Self::Stage { source, .. } => source.kind(),
        }
    }

    /// Name of the innermost pipeline stage this error passed through.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Self::Stage { stage, source } => source.stage().or(Some(stage)),
            _ => None,
        }
    }
}

/// Attaches a pipeline stage name to errors.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| StsError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

pub(crate) fn ensure_shape(expected: &[usize], found: &[usize]) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(StsError::ShapeMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        })
    }
}
