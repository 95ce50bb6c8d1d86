use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Core(#[from] ppgwas_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("framing error: {0}")]
    Frame(String),

    #[error("malformed {what} payload: {reason}")]
    Payload { what: &'static str, reason: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("timed out after {secs} s waiting in phase {phase}")]
    Timeout { phase: String, secs: u64 },

    #[error("session aborted: {0}")]
    Aborted(String),

    #[error("connection closed")]
    Closed,
}

pub type NetResult<T> = std::result::Result<T, NetError>;
