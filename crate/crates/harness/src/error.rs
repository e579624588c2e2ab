use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] iee_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for data problems,
    /// 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use iee_core::Error as E;
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Core(
                E::Config(_) | E::InvalidPlan(_) | E::Unknown { .. } | E::Unsupported(_) | E::Infeasible(_),
            ) => 2,
            HarnessError::Core(E::LatencyTable(_)) => 3,
            _ => 1,
        }
    }
}
