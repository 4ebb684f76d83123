//! Wire protocol v1: framing, error vocabulary, token authentication and
//! the blocking TCP transport shared by every service in the federation.

mod auth;
mod frame;
mod transport;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use auth::{authenticate, AuthOk, AuthToken, Credentials, Role, Roster, RosterEntry, Session};
pub use frame::{
    decode_frame, encode_frame, read_frame, write_frame, CodecError, Frame, Kind, HEADER_LEN,
    MAX_BODY_LEN,
};
pub use transport::{
    serve, Connection, Dialer, Service, ServerHandle, TcpDialer, DEFAULT_IO_TIMEOUT,
};

/// Closed set of error codes carried in `ERROR` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
#[repr(u8)]
pub enum ErrorCode {
    UnknownNode = 1,
    BadSecret = 2,
    NotFound = 3,
    Malformed = 4,
    Oversize = 5,
    Unauthorized = 6,
    Internal = 7,
    Conflict = 8,
}

impl From<ErrorCode> for u8 {
    fn from(code: ErrorCode) -> u8 {
        code as u8
    }
}

impl TryFrom<u8> for ErrorCode {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Ok(match value {
            1 => ErrorCode::UnknownNode,
            2 => ErrorCode::BadSecret,
            3 => ErrorCode::NotFound,
            4 => ErrorCode::Malformed,
            5 => ErrorCode::Oversize,
            6 => ErrorCode::Unauthorized,
            7 => ErrorCode::Internal,
            8 => ErrorCode::Conflict,
            other => return Err(format!("unregistered error code {other}")),
        })
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ErrorCode::UnknownNode => "UnknownNode",
            ErrorCode::BadSecret => "BadSecret",
            ErrorCode::NotFound => "NotFound",
            ErrorCode::Malformed => "Malformed",
            ErrorCode::Oversize => "Oversize",
            ErrorCode::Unauthorized => "Unauthorized",
            ErrorCode::Internal => "Internal",
            ErrorCode::Conflict => "Conflict",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub code: ErrorCode,
    pub detail: String,
}

impl ErrorReply {
    pub fn frame(&self) -> Frame {
        Frame::from_message(Kind::Error, self).expect("error replies always serialize")
    }
}
