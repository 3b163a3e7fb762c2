use std::fmt::Display;
use std::io::ErrorKind;

use hat_core::Error;

pub const GENERAL: u8 = 1;
pub const CONFIG: u8 = 2;
pub const NUMERIC: u8 = 3;
pub const MISSING_ARTIFACT: u8 = 4;

/// An error message with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => CONFIG,
            Error::NonFinite(_) => NUMERIC,
            Error::Checkpoint { .. } => MISSING_ARTIFACT,
            Error::Io(io) if io.kind() == ErrorKind::NotFound => MISSING_ARTIFACT,
            _ => GENERAL,
        };
        Self::new(code, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::new(GENERAL, e)
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

/// Attaches the path of a missing input to the message.
pub fn missing(path: &std::path::Path, e: Error) -> Failure {
    let mut f = Failure::from(e);
    if f.code == MISSING_ARTIFACT && !f.message.contains(&path.display().to_string()) {
        f.message = format!("{}: {}", path.display(), f.message);
    }
    f
}
