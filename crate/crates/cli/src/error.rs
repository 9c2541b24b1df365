use std::path::PathBuf;

use geomc_core::SamplerError;
use geomc_models::DataError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("line {line}: `{key}` is set twice (first on line {first})")]
    Duplicate { key: String, line: usize, first: usize },

    #[error("missing required key `{0}`")]
    Missing(String),

    #[error("line {line}: `{key}`: {message}")]
    Invalid { key: String, line: usize, message: String },

    #[error("line {line}: unknown key `{key}`")]
    Unknown { key: String, line: usize },

    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),

    #[error("data: {0}")]
    Data(#[from] DataError),

    /// Model/sampler mismatch or bad kernel settings, found before sampling.
    #[error("setup: {0}")]
    Setup(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("compare: {0}")]
    Compare(String),
}

impl CliError {
    /// 1 for anything wrong with the inputs, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Data(_) | CliError::Setup(_) | CliError::Compare(_) => 1,
            CliError::Sampling(_) | CliError::Io { .. } => 2,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Config(m) => CliError::Setup(m),
            other => CliError::Sampling(other.to_string()),
        }
    }
}
