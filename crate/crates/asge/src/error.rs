use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the training engine.
///
/// The variants map onto failure classes rather than call sites: `Config`
/// for shape/geometry/architecture problems detected before or during
/// construction, `Input` for bad runtime values (out-of-range labels),
/// `Format` for malformed on-disk artifacts, and `Usage` for API misuse
/// (wrong prediction strategy, missing best-layer record).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("input: {0}")]
    Input(String),

    #[error("format: {0}")]
    Format(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Machine-parseable single-word reason prefix, used by the CLI.
    pub fn reason(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Format(_) => "format",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
        }
    }
}
