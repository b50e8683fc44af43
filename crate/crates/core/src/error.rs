use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range [0, {bound})")]
    Index { index: usize, bound: usize },

    #[error("timestep ordering violated: t_prev={t_prev} must be below t={t}")]
    Ordering { t: usize, t_prev: usize },

    #[error("numeric degeneracy: {0}")]
    Degenerate(String),

    #[error("non-finite value at {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error(
        "training aborted at stage {stage}, iteration {iteration}: {detail} (last good checkpoint: {last_good:?})"
    )]
    Aborted {
        stage: u8,
        iteration: u64,
        detail: String,
        last_good: Option<PathBuf>,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("malformed {what}: {reason}")]
    Malformed { what: &'static str, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status for command-line use: 2 for bad input or
    /// configuration, 3 for a numeric abort, 4 for incompatible checkpoints.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Aborted { .. } => 3,
            Error::Incompatible(_) => 4,
            Error::Tensor(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Malformed {
            what,
            reason: reason.into(),
        }
    }
}
