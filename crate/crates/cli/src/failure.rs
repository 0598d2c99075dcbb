use miuk_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_COMPATIBILITY: i32 = 4;

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }

    pub fn compatibility(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_COMPATIBILITY,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Failure {
            code: 1,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Numeric(_) | Error::NonFinite { .. } => EXIT_NUMERIC,
            Error::Compatibility(_) | Error::UnknownToken(_) => EXIT_COMPATIBILITY,
            Error::Config(_)
            | Error::Dataset { .. }
            | Error::Invalid(_)
            | Error::Format { .. }
            | Error::TooManyRejects { .. }
            | Error::Json(_)
            | Error::Io { .. } => EXIT_CONFIG,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}
