use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested op.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An op produced NaN or infinity from finite inputs.
    #[error("numeric error in {op}: non-finite value in output")]
    Numeric { op: &'static str },

    /// A hyperparameter or argument is outside its valid domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file does not follow its expected layout.
    #[error("format error in {path}{}: {detail}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Format {
        path: String,
        line: Option<usize>,
        detail: String,
    },

    /// Frozen model file rejected while decoding.
    #[error("frozen model rejected: bad {field}: {detail}")]
    Frozen { field: &'static str, detail: String },

    #[error("unsupported frozen model version {0}")]
    UnsupportedVersion(u32),

    /// Experiment configuration is inconsistent.
    #[error("configuration error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, line: Option<usize>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            line,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }
}
