use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is outside its contract.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An operation was invoked in a state that does not permit it.
    #[error("invalid state: {0}")]
    State(String),

    /// The peer sent something malformed or out of sequence.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("decode error: {0}")]
    Decode(String),

    /// The two parties disagree on a negotiated parameter.
    #[error("handshake mismatch on `{field}`: local {local}, peer {peer}")]
    Handshake {
        field: String,
        local: String,
        peer: String,
    },

    #[error("link closed")]
    Disconnected,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}
