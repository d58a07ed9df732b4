use std::path::{Path, PathBuf};

pub type Result<T, E = AppError> = std::result::Result<T, E>;

/// Failures of the command-line workflows, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] ftvp_core::Error),
}

impl AppError {
    pub fn data(msg: impl Into<String>) -> Self {
        AppError::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        AppError::Config(msg.into())
    }

    /// 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> u8 {
        use ftvp_core::Error as E;
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) | AppError::Io { .. } => 3,
            AppError::Numeric(_) => 4,
            AppError::Core(e) => match e {
                E::Config(_) | E::UnknownMode(_) => 2,
                E::NonFinite { .. } | E::NonFiniteParam(_) => 4,
                _ => 3,
            },
        }
    }
}

/// Attach the path to an IO error.
pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| AppError::Io { path: path.to_path_buf(), source })
    }
}
