use std::path::PathBuf;

/// Errors raised across the pipeline, categorized by what went wrong.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two inputs disagree on a shape or count that the operation requires to match.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A scalar argument (step index, strength, clip length, ...) is outside its domain.
    #[error("out of range: {0}")]
    Range(String),

    /// An attention record or checkpoint does not line up with the model it is applied to.
    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("enhancer `{name}` failed: {detail}")]
    Enhancer { name: String, detail: String },

    #[error("clip {index}: {source}")]
    Clip {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged in {stage} at iteration {iteration}: {detail}")]
    Divergence {
        stage: String,
        iteration: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_clip(self, index: usize) -> Self {
        Error::Clip {
            index,
            source: Box::new(self),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $kind:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$kind(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
