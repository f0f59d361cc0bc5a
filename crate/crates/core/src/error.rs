use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle} is at the logarithm cut locus (pi)")]
    AngleNearPi { angle: f64 },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("no consensus: best hypothesis has {best} inliers, {required} required")]
    NoConsensus { best: usize, required: usize },

    #[error("frame index sets disagree: {0}")]
    FrameMismatch(String),

    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("samples are not sorted by depth at position {index}")]
    UnsortedSamples { index: usize },

    #[error("divergence detected at step {step}: loss {loss} exceeds 10x initial {initial}")]
    DivergenceDetected { step: usize, loss: f64, initial: f64 },

    #[error("grid has no zero crossing")]
    NoSurface,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("cycle {cycle}: {source}")]
    InCycle {
        cycle: usize,
        #[source]
        source: Box<Error>,
    },

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad inputs rather than by the computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidInput(_)
            | Error::Parse { .. }
            | Error::FrameMismatch(_)
            | Error::DimensionMismatch(_)
            | Error::EmptyInput(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::InCycle { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
