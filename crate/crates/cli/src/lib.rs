//! Library half of the `starkit` benchmark binary: problem generators,
//! benchmark drivers, and CSV rendering. The binary itself only parses
//! flags and routes to [`bench`].

use std::fmt;

pub mod bench;
pub mod csvout;
pub mod stencil;

/// Driver-level failures, separated so the binary can map them to distinct
/// exit codes: bad invocations exit 2, everything else exits 1.
#[derive(Debug)]
pub enum CliError {
    /// The invocation itself is wrong (flag combinations, ranges).
    Usage(String),
    /// A benchmark's correctness check failed; no timing was reported.
    Oracle(String),
    /// The runtime reported an error.
    Core(starkit_core::Error),
    Io(std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {msg}"),
            CliError::Oracle(msg) => write!(f, "correctness oracle failed: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<starkit_core::Error> for CliError {
    fn from(e: starkit_core::Error) -> CliError {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Io(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
