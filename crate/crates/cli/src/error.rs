use std::path::PathBuf;

use wdgtc::WdgError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] WdgError),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    /// 0 success, 1 unexpected I/O, 2 usage or parse, 3 domain or solver.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Parse { .. } => 2,
            CliError::Io { .. } | CliError::Core(WdgError::Io(_)) => 1,
            CliError::Core(WdgError::Parse { .. }) => 2,
            CliError::Core(_) | CliError::Domain(_) => 3,
        }
    }

    /// Attaches a file name to core errors raised while reading it.
    pub fn in_file(path: &std::path::Path, err: WdgError) -> Self {
        match err {
            WdgError::Parse { line, msg } => CliError::Parse { path: path.to_path_buf(), line, msg },
            WdgError::Io(source) => CliError::Io { path: path.to_path_buf(), source },
            other => CliError::Core(other),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
