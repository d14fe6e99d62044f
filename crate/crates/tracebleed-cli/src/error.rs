use std::fmt;

/// CLI failure classes, mapped to exit codes: validation 2, dependency 3,
/// runtime 4.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    /// A required upstream artifact is missing; names the stage to run first.
    Dependency { missing: String, run_first: String },
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) => write!(f, "validation error: {msg}"),
            CliError::Dependency { missing, run_first } => {
                write!(f, "missing artifact {missing}; run the `{run_first}` stage first")
            }
            CliError::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<tracebleed::Error> for CliError {
    fn from(e: tracebleed::Error) -> Self {
        match e {
            tracebleed::Error::Config(msg) => CliError::Validation(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
