use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug)]
pub enum Error {
    Io { path: PathBuf, source: io::Error },
    /// A cell that does not parse as a real number. `row` and `column` are 1-based
    /// positions in the file, counting the header line when present.
    Parse { row: usize, column: usize, cell: String },
    Arity { row: usize, expected: usize, found: usize },
    ConstantFeature(String),
    EmptyDataset,
    InvalidSplit(String),
    CostSchedule(String),
    InvalidArgument(String),
    InvalidAction(String),
    EpisodeFinished,
    Divergence { step: usize, loss: f64 },
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {}", path.display(), source),
            Error::Parse { row, column, cell } => {
                write!(f, "row {row}, column {column}: cannot parse {cell:?} as a number")
            }
            Error::Arity { row, expected, found } => {
                write!(f, "row {row}: expected {expected} values, found {found}")
            }
            Error::ConstantFeature(name) => write!(f, "constant feature {name:?}"),
            Error::EmptyDataset => write!(f, "dataset has no rows"),
            Error::InvalidSplit(msg) => write!(f, "invalid split: {msg}"),
            Error::CostSchedule(msg) => write!(f, "cost schedule: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "{msg}"),
            Error::InvalidAction(msg) => write!(f, "invalid action: {msg}"),
            Error::EpisodeFinished => write!(f, "episode already finished"),
            Error::Divergence { step, loss } => {
                write!(f, "training diverged at step {step} (loss {loss})")
            }
            Error::Format(msg) => write!(f, "malformed file: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Format(err.to_string())
    }
}
