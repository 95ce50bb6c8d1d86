use std::io;

use thiserror::Error;

/// Errors raised by the pipeline library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("checksum mismatch for {file}: manifest {expected}, computed {actual}")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("invalid dosage {value} at row {row}, column {col}")]
    InvalidDosage { value: i8, row: usize, col: usize },

    #[error("collinear covariates: Z1'Z1 is not positive definite")]
    CollinearCovariates,

    #[error("zero variance for SNP {snp}; it should have been removed by QC")]
    ZeroVariance { snp: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("protocol error: {0}")]
    Protocol(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
