use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error categories. The CLI maps each variant to its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("optimization error: {0}")]
    Optimization(String),

    #[error("config error at key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("malformed input {path:?} at byte offset {offset}: {msg}")]
    Format { path: PathBuf, offset: u64, msg: String },

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category name, also used as the process exit-code class.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Geometry(_) => "geometry",
            Error::Simulation(_) => "simulation",
            Error::Optimization(_) => "optimization",
            Error::Config { .. } => "config",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 2,
            Error::Config { .. } => 3,
            Error::Io { .. } => 4,
            Error::Format { .. } => 5,
            Error::Geometry(_) => 6,
            Error::Simulation(_) => 7,
            Error::Optimization(_) => 8,
        }
    }
}
