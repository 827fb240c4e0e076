//! Error types shared across the simulator.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum FedSimError {
    /// A caller violated an API precondition (length mismatch, bad range, ...).
    #[error("usage: {0}")]
    Usage(String),

    /// Invalid or inconsistent run configuration.
    #[error("config: {0}")]
    Config(String),

    /// Local optimization produced a non-finite loss.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    /// A peer violated the message protocol.
    #[error("protocol: {0}")]
    Protocol(String),

    /// A message could not be encoded or decoded.
    #[error("encoding: {0}")]
    Encoding(String),

    /// Federation startup failed (handshake timeout, bind failure, ...).
    #[error("startup: {0}")]
    Startup(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FedSimError>;
