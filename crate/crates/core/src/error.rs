use thiserror::Error;

/// Errors produced across the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A point could not be projected into a device.
    #[error("projection error: point depth {depth:.3e} is not in front of the device")]
    Projection { depth: f64 },
    /// A triangulation or intersection with (near) parallel geometry.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    /// Inconsistent configuration or mismatched inputs.
    #[error("config error: {0}")]
    Config(String),
    /// Incompatible tensor shapes on the tape.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// NaN or infinite values appeared during optimization.
    #[error("numerical failure at iteration {iteration}: {message}")]
    Numerical { iteration: usize, message: String },
    #[error("parse error in {what}: {message}")]
    Parse { what: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
