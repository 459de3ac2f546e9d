use std::fmt;
use std::io::ErrorKind;
use std::path::PathBuf;

/// A command failure and the exit status it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration.
    Usage(String),
    /// A referenced input does not exist.
    MissingPath(PathBuf),
    Library(ledmerge::Error),
}

impl CliError {
    /// 2 for configuration and path problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::MissingPath(_) => 2,
            CliError::Library(ledmerge::Error::Config(_)) => 2,
            CliError::Library(ledmerge::Error::Io { source, .. }) if source.kind() == ErrorKind::NotFound => 2,
            CliError::Library(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::MissingPath(p) => write!(f, "no such file: {}", p.display()),
            CliError::Library(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ledmerge::Error> for CliError {
    fn from(e: ledmerge::Error) -> Self {
        CliError::Library(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
