use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    /// An index or scalar lies outside its admissible range.
    #[error("out of range: {0}")]
    Range(String),

    /// Inputs violate a mathematical precondition (normalization, emptiness, support).
    #[error("domain error: {0}")]
    Domain(String),

    /// No recomputation plan fits under the cap.
    #[error("infeasible plan: layer {layer} needs {needed_bytes} B but the cap is {cap_bytes} B")]
    InfeasiblePlan {
        layer: usize,
        needed_bytes: u64,
        cap_bytes: u64,
    },

    /// The selector could not find any assignment meeting the hard constraints.
    #[error("no feasible assignment: {0}")]
    NoFeasibleAssignment(String),

    /// Exhaustive search refused because the problem is too large.
    #[error("size guard: {0}")]
    SizeGuard(String),

    /// Every selected device dropped out in a round.
    #[error("round {round}: all {selected} selected devices dropped out for lack of memory")]
    AllDropout { round: usize, selected: usize },

    /// A configuration value is missing, unknown or invalid.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
