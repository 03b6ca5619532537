use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    #[error("invalid interval: t_end ({t_end}) must exceed t0 ({t0})")]
    InvalidInterval { t0: f64, t_end: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Integration produced a non-finite state. Carries everything computed
    /// up to (and excluding) the offending output time.
    #[error("integration diverged at t = {t}")]
    IntegrationDiverged {
        t: f64,
        partial: Box<crate::odesim::Trajectory>,
    },

    #[error("inconsistent constraint Jacobian: directional mismatch {rel_err:.3e} along probe {probe}")]
    InconsistentJacobian { probe: usize, rel_err: f64 },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.into(),
        }
    }
}
