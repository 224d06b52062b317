//! Error type shared by every module in the crate.

use thiserror::Error;

use crate::protocol::TranscriptEntry;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs that fail basic domain checks (non-finite values, out-of-range
    /// Bloch entries, bad preset parameters).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A matrix or Bloch parameterization that does not describe a physical
    /// state where one is required.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A frame map whose rotation part is not orthogonal.
    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    /// Measurement records that cannot be joined into pairs.
    #[error("record join failed: {0}")]
    RecordJoin(String),

    /// Some (axis, axis) cell was never measured, so no estimate exists.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A wire message that is not valid one-line JSON.
    #[error("decode error at byte {offset}: {detail}")]
    Decode { offset: usize, detail: String },

    /// A well-formed message that violates the protocol (unknown kind,
    /// wrong session, out-of-phase message, verdict disagreement).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The remote peer speaks a different protocol version.
    #[error("protocol version mismatch: local {local}, remote {remote}")]
    VersionMismatch { local: u32, remote: u32 },

    /// The session could not run to completion; carries whatever part of
    /// the transcript was assembled before the failure.
    #[error("session aborted: {detail}")]
    SessionAborted {
        detail: String,
        partial: Vec<TranscriptEntry>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn aborted(detail: impl Into<String>) -> Self {
        Error::SessionAborted {
            detail: detail.into(),
            partial: Vec::new(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
