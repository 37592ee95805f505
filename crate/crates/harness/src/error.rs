use std::path::PathBuf;

use lookbehind_core::Error as CoreError;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {reason}", path.display())]
    Data { path: PathBuf, reason: String },
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 numeric, 4 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numeric(_) => 3,
            HarnessError::Io { .. } | HarnessError::Data { .. } => 4,
        }
    }
}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Numeric { .. } => HarnessError::Numeric(e.to_string()),
            CoreError::Format { .. } => HarnessError::Data {
                path: PathBuf::from("<input>"),
                reason: e.to_string(),
            },
            _ => HarnessError::Config(e.to_string()),
        }
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        let path = PathBuf::from("<csv>");
        match e.into_kind() {
            csv::ErrorKind::Io(source) => HarnessError::Io { path, source },
            other => HarnessError::Data {
                path,
                reason: format!("{other:?}"),
            },
        }
    }
}
