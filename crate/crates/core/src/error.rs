use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("SVD did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("shape mismatch{}: {msg}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    ShapeMismatch { layer: Option<usize>, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate second-moment matrix: {0}")]
    DegenerateSigma(String),

    #[error("domain statistics required by the regularizer are missing")]
    StatsMissing,

    #[error("insufficient samples: need at least {needed}, have {have}")]
    InsufficientSamples { needed: usize, have: usize },

    #[error("rank {k} out of range 1..={max}")]
    RankOutOfRange { k: usize, max: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("specificity class `{0}` is empty")]
    EmptySpecificSet(&'static str),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch { layer: None, msg: msg.into() }
    }

    pub(crate) fn shape_at(layer: usize, msg: impl Into<String>) -> Self {
        Error::ShapeMismatch { layer: Some(layer), msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { path: path.into(), msg: msg.into() }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
