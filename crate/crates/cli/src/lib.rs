//! Library surface of the command-line pipeline: experiment configuration,
//! the collect/train/eval/reproduce commands, and their exit-code mapping.

pub mod commands;
pub mod config;

/// Process exit codes, one per failure family.
pub mod exit_codes {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const TRAINING: i32 = 4;
    pub const EVALUATION: i32 = 5;
    /// The pipeline ran, but the reproduce thresholds did not hold.
    pub const THRESHOLDS: i32 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training: {0}")]
    Training(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit_codes::CONFIG,
            CliError::Data(_) => exit_codes::DATA,
            CliError::Training(_) => exit_codes::TRAINING,
            CliError::Evaluation(_) => exit_codes::EVALUATION,
        }
    }
}
