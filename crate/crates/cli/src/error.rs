use serde::Serialize;

use bismut_core::error::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(e) => match e {
                CoreError::SingularProjection { .. }
                | CoreError::IllConditionedRegression { .. }
                | CoreError::BudgetExceeded { .. }
                | CoreError::WeightOverflow { .. } => EXIT_NUMERICAL,
                CoreError::Io(_) => EXIT_INTERNAL,
                _ => EXIT_CONFIG,
            },
            CliError::Io(_) | CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub fn kind(&self) -> String {
        match self {
            CliError::Config(_) => "config".into(),
            CliError::Core(e) => {
                let dbg = format!("{e:?}");
                dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("core").to_string()
            }
            CliError::Io(_) => "io".into(),
            CliError::Internal(_) => "internal".into(),
        }
    }

    /// Machine-readable record written to stderr on failure.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            status: &'a str,
            kind: String,
            message: String,
            exit_code: i32,
        }
        serde_json::to_string(&Record {
            status: "error",
            kind: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        })
        .unwrap_or_else(|_| "{\"status\":\"error\"}".into())
    }
}
