use std::path::PathBuf;

use thiserror::Error;

/// Failures surfaced by the command-line front end, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: line {line}: {message}")]
    ConfigLine { path: PathBuf, line: usize, message: String },
    #[error("method {method} cannot be used with a {design} design")]
    IncompatibleMethodDesign { method: String, design: String },
    #[error("row {row}, column {column}: cannot parse {value:?} as a number")]
    Parse { row: usize, column: String, value: String },
    #[error("row {row}: labeled row has no value in column {column}")]
    MissingOnLabeled { row: usize, column: String },
    #[error("row {row}: label {value:?} is not 0 or 1")]
    InvalidLabel { row: usize, value: String },
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("numerical failure: {0}")]
    Numerical(ptd::Error),
    #[error("{0} acceptance band(s) failed")]
    BandsFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ConfigLine { .. } | CliError::IncompatibleMethodDesign { .. } => 1,
            CliError::Parse { .. }
            | CliError::MissingOnLabeled { .. }
            | CliError::InvalidLabel { .. }
            | CliError::Data(_)
            | CliError::Io { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::BandsFailed(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

impl From<ptd::Error> for CliError {
    fn from(e: ptd::Error) -> Self {
        use ptd::Error as E;
        if e.is_numerical() {
            return CliError::Numerical(e);
        }
        match e {
            E::InvalidConfig(m) => CliError::Usage(m),
            E::UnsupportedKind(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
