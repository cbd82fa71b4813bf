use std::fmt;

use mmvl_core::Error;

/// Exit codes: 0 success, 1 failed checks or other runtime failure,
/// 2 usage or configuration, 3 numeric abort, 4 artifact mismatch.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self::new(4, message)
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new(1, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::Contract(_)
            | Error::Plan(_)
            | Error::Index { .. }
            | Error::Family(_)
            | Error::Domain(_)
            | Error::Pairing { .. } => 2,
            Error::NumericAbort { .. } | Error::Numeric(_) => 3,
            Error::Format(_) | Error::Dimension(_) => 4,
            Error::Gate { .. } | Error::Io(_) | Error::Json(_) => 1,
        };
        CliError::new(code, e.to_string())
    }
}
