use std::path::PathBuf;

/// Errors produced by the reconstruction engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: expected {expected}, found {found}")]
    GridMismatch { expected: String, found: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("tilt ({theta_x}°, {theta_y}°) exceeds the ±{limit}° guard")]
    TiltOutOfRange {
        theta_x: f64,
        theta_y: f64,
        limit: f64,
    },

    #[error("Pearson correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("solver diverged at iteration {iteration}: cost {previous} -> {current}")]
    Diverged {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("malformed array file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("output directory {0} already holds a dataset (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
