// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

/// Failure classes, one per process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric invariant violated: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    /// Attach the prompt id a module error came from.
    pub fn at(prompt_id: &str) -> impl Fn(ctxprobe::Error) -> CliError + '_ {
        move |e| match CliError::from(e) {
            CliError::Config(m) => CliError::Config(format!("{prompt_id}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{prompt_id}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{prompt_id}: {m}")),
        }
    }
}

impl From<ctxprobe::Error> for CliError {
    fn from(e: ctxprobe::Error) -> Self {
        use ctxprobe::Error as E;
        match e {
            E::NonFinite(_) | E::AllMasked => CliError::Numeric(e.to_string()),
            E::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
