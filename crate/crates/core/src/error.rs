use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("simulation produced a non-finite state at t={t}, path {path} (previous state {state:?})")]
    Simulation { t: f64, path: usize, state: Vec<f64> },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("unknown name `{name}` for `{key}` in the {registry} registry")]
    Registry {
        registry: &'static str,
        key: String,
        name: String,
    },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed ensemble dump: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}
