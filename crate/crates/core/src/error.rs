use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("significance level {0} must lie strictly inside (0, 1)")]
    InvalidAlpha(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite training loss at epoch {epoch} (batch starting at row {batch_start})")]
    NonFiniteLoss { epoch: usize, batch_start: usize },

    #[error("non-finite gradient in surrogate search at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("loss {0} is not supported here")]
    UnsupportedLoss(&'static str),

    #[error("record was calibrated with score kind {expected:?}, got {got:?}")]
    ScoreKindMismatch {
        expected: crate::conformal::ScoreKind,
        got: crate::conformal::ScoreKind,
    },

    #[error("score configuration digest mismatch: record has {record}, detector uses {detector}")]
    DigestMismatch { record: String, detector: String },

    #[error("conformal quantile is infinite; the band is all of R^k")]
    UnboundedQuantile,

    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("{path}: row {row}, column '{column}': cannot parse {value:?} as a finite real")]
    ParseCell {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("unsupported model file format {format:?} version {version}")]
    ModelFormat { format: String, version: u32 },

    /// Carries the inner message in its own text, so it is not exposed as a
    /// separate source.
    #[error("[{stage}] seed {seed}: {inner}")]
    Stage {
        stage: &'static str,
        seed: u64,
        inner: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at_stage(self, stage: &'static str, seed: u64) -> Self {
        Error::Stage {
            stage,
            seed,
            inner: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
