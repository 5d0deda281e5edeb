//! Error types shared across the crate.
//!
//! Every fallible public operation returns [`Result`]. The variants map onto
//! the process exit codes used by the CLI (see [`Error::exit_code`]), so a
//! scripted caller can distinguish "your config is wrong" from "the data file
//! is corrupt" from "training blew up numerically".

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, inconsistent shapes
    /// declared by the caller, unsupported flag combinations.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent data: unreadable dataset files, truncated
    /// tensor blocks, header/payload disagreements, empty inputs.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: non-finite loss, degenerate matrices where a
    /// well-conditioned one was required, failed convergence.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Underlying I/O failure while reading or writing files.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class. `0` is success, `1` is
    /// reserved for unexpected panics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numerical(_) => 4,
            Error::Io(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Attach a file path to an I/O error, so "No such file or directory"
/// names the file it was about.
pub fn io_at(path: &std::path::Path, err: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(err.kind(), format!("{}: {err}", path.display())))
}

/// Shorthand for building a config error from format args.
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

/// Shorthand for building a data error from format args.
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}

/// Shorthand for building a numerical error from format args.
macro_rules! numerical_err {
    ($($arg:tt)*) => { $crate::error::Error::Numerical(format!($($arg)*)) };
}

pub(crate) use {config_err, data_err, numerical_err};
