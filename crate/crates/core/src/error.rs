use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by [`ErrorClass`] so the CLI can map them onto
/// stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("invalid case: {0}")]
    InvalidCase(String),

    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),

    #[error("no slack bus")]
    NoSlack,

    #[error("multiple slack buses ({0:?})")]
    MultipleSlack(Vec<u32>),

    #[error("{element} references unknown bus {bus}")]
    UnknownBus { element: String, bus: u32 },

    #[error("in-service branch {from}-{to} has zero reactance")]
    ZeroReactance { from: u32, to: u32 },

    #[error("power flow did not converge after {iterations} iterations (max mismatch {mismatch:.3e} p.u.)")]
    PowerFlowDiverged { iterations: usize, mismatch: f64 },

    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("unobservable system: {0}")]
    Unobservable(String),

    #[error("degenerate measurement: {0}")]
    Degenerate(String),

    #[error("Gauss-Newton diverged after {iterations} iterations (mismatch {mismatch:.3e})")]
    GaussNewtonDiverged { iterations: usize, mismatch: f64 },

    #[error("internal numerical error: {0}")]
    Internal(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
    Io,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dims(what: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        }
    }

    /// Wraps the error with a description of what was being done.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Context { source, .. } => source.class(),
            Error::Syntax { .. }
            | Error::InvalidCase(_)
            | Error::DuplicateBus(_)
            | Error::NoSlack
            | Error::MultipleSlack(_)
            | Error::UnknownBus { .. }
            | Error::ZeroReactance { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => ErrorClass::Io,
            Error::DimensionMismatch { .. } | Error::InvalidArgument(_) | Error::Config(_) => {
                ErrorClass::Config
            }
            Error::PowerFlowDiverged { .. }
            | Error::Unobservable(_)
            | Error::Degenerate(_)
            | Error::GaussNewtonDiverged { .. }
            | Error::Internal(_) => ErrorClass::Numerical,
        }
    }

    /// Process exit code used by the `tsa` binary.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Numerical => 3,
            ErrorClass::Io => 4,
        }
    }
}
