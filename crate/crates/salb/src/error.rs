use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] salb_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error{}: {reason}", version.map(|v| format!(" (file version {v})")).unwrap_or_default())]
    Format { reason: String, version: Option<u32> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} already exists; pass --force to overwrite")]
    OutputExists(PathBuf),
    #[error("gradient check failed")]
    GradCheckFailed,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(reason: impl Into<String>, version: Option<u32>) -> Self {
        Error::Format { reason: reason.into(), version }
    }

    /// True for problems with the request itself rather than with running it.
    pub fn is_validation(&self) -> bool {
        use salb_core::Error as C;
        match self {
            Error::Config(_) | Error::OutputExists(_) => true,
            Error::Core(e) => matches!(
                e,
                C::ConfigInvalid(_) | C::SpecInvalid(_) | C::DegenerateTargets | C::BatchTooSmall { .. }
            ),
            _ => false,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            1
        } else {
            2
        }
    }
}
