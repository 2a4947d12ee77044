use std::path::PathBuf;

use mapdistill_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 0 success, 1 usage/config/input error, 2 numeric failure, 3 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(CoreError::Numeric(_)) => 2,
            Self::Io { .. } => 3,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(e) => match e {
                CoreError::Shape(_) | CoreError::Rank { .. } => "shape",
                CoreError::Numeric(_) => "numeric",
                CoreError::Geometry(_) => "geometry",
                CoreError::Config(_) => "config",
                CoreError::Capacity { .. } => "capacity",
                CoreError::Validation(_) => "validation",
                CoreError::Decode(_) => "decode",
            },
            Self::Io { .. } => "io",
            Self::Parse { .. } => "parse",
            Self::Usage(_) => "usage",
        }
    }

    /// Single-line JSON object for standard error.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}
