use std::path::Path;

use thiserror::Error;

/// Problems loading or validating model inputs.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn csv(path: &Path, source: csv::Error) -> Self {
        DataError::Csv {
            path: path.display().to_string(),
            source,
        }
    }
}
