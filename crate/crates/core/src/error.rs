use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("nodes {0} and {1} are not connected")]
    Unreachable(usize, usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite loss at {0}")]
    NonFinite(String),

    #[error("missing sample file {path} for sample {sample_id}")]
    MissingSample { sample_id: String, path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI on failure.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Graph(_) => "invalid_graph",
            Error::Unreachable(..) => "unreachable",
            Error::Shape(_) => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Parse { .. } => "parse_error",
            Error::Format { .. } => "bad_format",
            Error::CheckpointMismatch(_) => "checkpoint_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::MissingSample { .. } => "missing_sample",
            Error::Io { .. } => "io_error",
            Error::Csv(_) => "csv_error",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $err:expr) => {
        if !$cond {
            return Err($err);
        }
    };
}
pub(crate) use ensure;
