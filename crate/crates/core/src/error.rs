use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("vocabulary is empty after filtering with min_freq = {min_freq}")]
    EmptyVocabulary { min_freq: usize },

    #[error("every document was dropped (min_terms = {min_terms})")]
    AllDocumentsDropped { min_terms: usize },

    #[error("expected {expected} embedding rows, file has {found}")]
    RowCountMismatch { expected: usize, found: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("inconsistent embedding dimension: line {line} has {found} values, expected {expected}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot normalize an all-zero bag of words (row {row})")]
    ZeroInput { row: usize },

    #[error("sinkhorn kernel collapsed in row {row} with nu = {nu}")]
    KernelCollapse { row: usize, nu: f64 },

    #[error(
        "non-finite loss at epoch {epoch}: total={total} recon={recon} kl_global={kl_global} \
         kl_local={kl_local} ecr={ecr}"
    )]
    NonFiniteLoss {
        epoch: usize,
        total: f64,
        recon: f64,
        kl_global: f64,
        kl_local: f64,
        ecr: f64,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps `self` with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error beneath any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
