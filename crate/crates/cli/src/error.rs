use serde::Serialize;

/// Failures the CLI reports, split by exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Bad flags, config files, or combinations of the two. Exit code 2.
    Config(String),
    /// Missing, unreadable, or inconsistent data and checkpoints. Exit code 3.
    Data(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct ErrorJson<'a> {
    kind: &'a str,
    message: &'a str,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) => m,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        let kind = match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
        };
        serde_json::json!({ "error": ErrorJson { kind, message: self.message() } }).to_string()
    }

    pub fn data_io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl std::error::Error for CliError {}

impl From<coanno_core::Error> for CliError {
    fn from(e: coanno_core::Error) -> Self {
        match e {
            coanno_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<coanno_service::ServiceError> for CliError {
    fn from(e: coanno_service::ServiceError) -> Self {
        match e {
            coanno_service::ServiceError::Core(core) => core.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_and_json() {
        let e: CliError = coanno_core::Error::Config("bad".into()).into();
        assert_eq!(e.exit_code(), 2);
        assert_eq!(e.to_json(), r#"{"error":{"kind":"config","message":"bad"}}"#);
        let e: CliError = coanno_core::Error::MalformedRecord("x".into()).into();
        assert_eq!(e.exit_code(), 3);
    }
}
