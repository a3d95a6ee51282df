use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An IMU interval outside (0, 0.1] s, which means samples were dropped.
    #[error("IMU measurement gap: dt = {dt} s")]
    MeasurementGap { dt: f64 },

    #[error("no correlation peak above threshold {threshold}")]
    NoPeak { threshold: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("data integrity error: {0}")]
    DataIntegrity(String),

    #[error("no sample within {max_gap_ns} ns of t = {query_ns}")]
    NoMatch { query_ns: i64, max_gap_ns: i64 },

    #[error("structural error: {0}")]
    Structural(String),

    #[error("underconstrained problem, unconstrained blocks: {}", blocks.join(", "))]
    Underconstrained { blocks: Vec<String> },

    #[error("nothing to evaluate: {0}")]
    EmptyEvaluation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Wraps the error with the name of the run phase that produced it.
    pub fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping phase context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Phase { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Underconstrained { .. } | Error::Structural(_) => 4,
            _ => 3,
        }
    }
}
