use thiserror::Error;

use crate::proto::{CodecError, ErrorCode, ErrorReply};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("bad secret for node `{0}`")]
    BadSecret(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("query syntax error at token {position}: {message}")]
    QuerySyntax { position: usize, message: String },
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("consent flag not set in container header")]
    ConsentMissing,
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("degenerate image: {0}")]
    Degenerate(String),
    #[error("federation has no live nodes")]
    EmptyFederation,
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("remote error ({}): {}", .0.code, .0.detail)]
    Remote(ErrorReply),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Wire error code for this error.
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::UnknownNode(_) => ErrorCode::UnknownNode,
            Error::BadSecret(_) => ErrorCode::BadSecret,
            Error::NotFound(_) => ErrorCode::NotFound,
            Error::Malformed(_)
            | Error::QuerySyntax { .. }
            | Error::ConsentMissing
            | Error::UnknownAlgorithm(_)
            | Error::Degenerate(_) => ErrorCode::Malformed,
            Error::Unauthorized(_) => ErrorCode::Unauthorized,
            Error::Conflict(_) => ErrorCode::Conflict,
            Error::Codec(CodecError::Oversize(_)) => ErrorCode::Oversize,
            Error::Codec(_) => ErrorCode::Malformed,
            Error::Remote(reply) => reply.code,
            Error::EmptyFederation | Error::Integrity(_) | Error::Io(_) | Error::Internal(_) => {
                ErrorCode::Internal
            }
        }
    }

    pub fn to_reply(&self) -> ErrorReply {
        match self {
            Error::Remote(reply) => reply.clone(),
            other => ErrorReply {
                code: other.code(),
                detail: other.to_string(),
            },
        }
    }

    /// True when the failure came from the transport rather than the peer's logic.
    pub fn is_connectivity(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Codec(CodecError::Truncated { .. })
        )
    }

    pub(crate) fn malformed(msg: impl Into<String>) -> Self {
        Error::Malformed(msg.into())
    }

    pub(crate) fn not_found(msg: impl Into<String>) -> Self {
        Error::NotFound(msg.into())
    }

    pub(crate) fn conflict(msg: impl Into<String>) -> Self {
        Error::Conflict(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Malformed(err.to_string())
    }
}
