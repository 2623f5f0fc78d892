use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {left} vs {right}")]
    GridMismatch { left: String, right: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("non-finite drift at cell ({ix}, {iy}) at t = {t}")]
    NonFiniteDrift { ix: usize, iy: usize, t: f64 },

    /// The requested step exceeds the explicit-Euler stability bound.
    #[error("time step {dt} exceeds the stable bound {stable_dt} ({what})")]
    Unstable {
        what: &'static str,
        dt: f64,
        stable_dt: f64,
    },

    #[error("density value {value:e} at cell {cell} is below the clamp tolerance")]
    NegativeDensity { cell: usize, value: f64 },

    #[error("agent {agent} has a non-finite position at step {step}")]
    NonFinitePosition { agent: usize, step: u64 },

    #[error("empty position set")]
    EmptyPositions,

    #[error("filter {label}: {msg} at step {step}")]
    Filter { label: String, step: u64, msg: String },

    #[error("noise covariance floor violated at cell {cell}: {value:e} < {floor:e}")]
    FloorViolation { cell: usize, value: f64, floor: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown suite '{0}' (expected one of consensus, riccati, kde, pde, sde)")]
    UnknownSuite(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_step(self, step: u64) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// Configuration problems map to exit code 2, everything else to 1.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::UnknownSuite(_))
    }
}
