use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or mismatched geometry.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed caller input (odd image size, label out of range, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A backward pass was fed a cache that does not belong to the forward call.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Statistics could not be formed (constant modality, empty split).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Dataset or model container could not be decoded.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A training or evaluation run failed.
    #[error("fold {fold}, seed {seed}: {source}")]
    Run {
        fold: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("json error on {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the filesystem rather than by bad values.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Run { source, .. } => source.is_io(),
            _ => false,
        }
    }

    /// The innermost error, looking through run context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Run { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn in_run(self, fold: usize, seed: u64) -> Self {
        Error::Run {
            fold,
            seed,
            source: Box::new(self),
        }
    }
}
