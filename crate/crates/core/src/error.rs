//! Error taxonomy shared by the library and the CLI exit-code contract.

/// Unified error type; variants map onto the CLI exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Input admits no well-posed solve (e.g. textureless images).
    #[error("ill-conditioned input: {0}")]
    IllConditioned(String),
    /// Scene synthesis could not satisfy its constraints.
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn parse(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI contract: 0 success, 1 usage, 2 ill-conditioned, 3 I/O.
    /// A missing input file is a usage error; malformed content is I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::IllConditioned(_) | Error::Generation(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
            Error::Parse { .. } | Error::Io { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
