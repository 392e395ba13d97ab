//! Command implementations behind the `pg-lab` binary.

pub mod config;
pub mod image_cmd;
pub mod output;
pub mod selftest;
pub mod svg;
pub mod toy;

use std::fmt;

use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Validation,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: FailureKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl fmt::Display) -> Self {
        Self {
            kind: FailureKind::Validation,
            message: message.to_string(),
        }
    }

    pub fn runtime(message: impl fmt::Display) -> Self {
        Self {
            kind: FailureKind::Runtime,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            FailureKind::Validation => EXIT_VALIDATION,
            FailureKind::Runtime => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. }
            | Error::Contract(_)
            | Error::UnknownKind(_)
            | Error::ClassIndex { .. }
            | Error::LengthMismatch { .. } => CliError::validation(e),
            _ => CliError::runtime(e),
        }
    }
}

/// Runs `f` on a rayon pool of `jobs` threads, or the global pool when `None`.
pub fn with_jobs<R: Send>(
    jobs: Option<usize>,
    f: impl FnOnce() -> R + Send,
) -> Result<R, CliError> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(CliError::validation("--jobs must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(CliError::runtime)?;
            Ok(pool.install(f))
        }
    }
}
