//! TCP deployment of the round loop. Clients keep their sequences; only
//! parameter sets, configs and metric records cross the wire.

mod client;
mod codec;
mod server;

use std::io;

use thiserror::Error;

use crate::data::DataError;
use crate::orchestrator::{ConfigError, OrchestratorError};

pub use client::{join, JoinOptions, JoinOutcome};
pub use codec::{
    decode_message, encode_message, encode_params, params_len, read_frame, type_name,
    update_frame_len, write_message, DecodeError, Message, FRAME_HEADER, GLOBAL, JOIN, MAX_FRAME,
    METRIC, SHUTDOWN, UPDATE, WELCOME,
};
pub use server::{serve, serve_on};

/// Reason string the server sends after the last round.
pub const DONE: &str = "done";
/// Reason string for an UPDATE that does not match the current round.
pub const STALE_ROUND: &str = "stale round";

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("site data does not fit the model: {0}")]
    Shape(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("refused by server: {0}")]
    Refused(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("client {0} disconnected mid-round")]
    Disconnected(u32),
    #[error("server closed the connection")]
    ServerGone,
    #[error(transparent)]
    Run(#[from] OrchestratorError),
}

impl NetError {
    fn io(context: impl Into<String>, source: io::Error) -> Self {
        NetError::Io {
            context: context.into(),
            source,
        }
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}
