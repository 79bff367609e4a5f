use std::fmt;
use std::path::{Path, PathBuf};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingInput(PathBuf),
    Io { path: PathBuf, source: std::io::Error },
    Core(bcpt_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::MissingInput(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(bcpt_core::Error::Diverged { .. }) => EXIT_DIVERGED,
            CliError::Core(bcpt_core::Error::Io { .. }) => EXIT_IO,
            // malformed inputs and invalid settings are both configuration problems
            CliError::Core(_) => EXIT_USAGE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::MissingInput(p) => write!(f, "input not found: {}", p.display()),
            CliError::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<bcpt_core::Error> for CliError {
    fn from(e: bcpt_core::Error) -> Self {
        CliError::Core(e)
    }
}
