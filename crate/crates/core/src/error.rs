use thiserror::Error;

/// Errors raised by tensor operations and the autodiff graph.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Degenerate {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Contract {
            op,
            detail: detail.into(),
        }
    }
}

/// Top-level error for everything above the tensor layer.
#[derive(Debug, Error)]
pub enum ArtError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: TensorError,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged at step {step}: {component} = {value}")]
    Divergence {
        step: usize,
        component: &'static str,
        value: f64,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ArtError> = std::result::Result<T, E>;

/// Attaches a pipeline stage name to tensor errors.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for std::result::Result<T, TensorError> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| ArtError::Stage { stage, source })
    }
}
