//! Maps failures onto process exit codes.

use std::fmt;
use std::process::ExitCode;

/// Bad input: flags, config, corpus files.
pub const EXIT_VALIDATION: u8 = 2;
/// Failure while loading a model, training, evaluating or writing output.
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn validation(error: anyhow::Error) -> Self {
        Self {
            code: EXIT_VALIDATION,
            error,
        }
    }

    pub fn runtime(error: anyhow::Error) -> Self {
        Self {
            code: EXIT_RUNTIME,
            error,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<ccgs::Error> for Failure {
    fn from(e: ccgs::Error) -> Self {
        use ccgs::Error::*;
        match e {
            InvalidArgument(_) | Corpus { .. } | Json(_) => Failure::validation(e.into()),
            _ => Failure::runtime(e.into()),
        }
    }
}

pub trait ResultExt<T> {
    fn validation(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn validation(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::validation(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::runtime(e.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_are_classified() {
        assert_eq!(Failure::from(ccgs::Error::InvalidArgument("x".into())).code, EXIT_VALIDATION);
        assert_eq!(Failure::from(ccgs::Error::Format("x".into())).code, EXIT_RUNTIME);
        assert_eq!(Failure::from(ccgs::Error::UnknownParameter("w".into())).code, EXIT_RUNTIME);
    }
}
