use std::fmt;
use std::path::Path;

pub type CliResult<T> = Result<T, CliError>;

/// An error with a stable code, printed as `error[CODE]: message`.
#[derive(Debug, thiserror::Error)]
pub struct CliError {
    code: &'static str,
    message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new("E_CONFIG", message)
    }

    pub fn missing(path: &Path, why: impl fmt::Display) -> Self {
        CliError::new("E_MISSING", format!("{}: {why}", path.display()))
    }

    pub fn code(&self) -> &'static str {
        self.code
    }

    /// Single line, newlines flattened.
    pub fn line(&self) -> String {
        format!("error[{}]: {}", self.code, self.message.replace('\n', " "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.line())
    }
}

impl From<splatstream::Error> for CliError {
    fn from(e: splatstream::Error) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("E_IO", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("E_JSON", e.to_string())
    }
}
