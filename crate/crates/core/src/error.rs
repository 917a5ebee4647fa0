use std::path::PathBuf;

/// Errors raised across the simulator, planner and reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate spectral model: {0}")]
    Degenerate(String),

    #[error("no candidate within slew limit {slew_limit} deg of theta = {current_theta} deg")]
    Unreachable { current_theta: f64, slew_limit: f64 },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("at pose (phi = {phi}, theta = {theta}): {source}")]
    AtPose {
        phi: f64,
        theta: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    pub(crate) fn at_pose(self, phi: f64, theta: f64) -> Self {
        Error::AtPose { phi, theta, source: Box::new(self) }
    }

    /// True for errors caused by invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidPose(_)
            | Error::InvalidGrid(_)
            | Error::InvalidArgument(_)
            | Error::ShapeMismatch(_)
            | Error::Config { .. } => true,
            Error::AtPose { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
