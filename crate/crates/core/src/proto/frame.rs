//! Length-prefixed frame codec.
//!
//! ```text
//! +----------------+--------+---------------------------+
//! | length: u32 BE | kind:u8| body: `length` bytes JSON |
//! +----------------+--------+---------------------------+
//! ```

use std::fmt;
use std::io::{self, Read, Write};

use serde::de::{DeserializeOwned, IgnoredAny};
use serde::Serialize;
use thiserror::Error;

pub const HEADER_LEN: usize = 5;

/// Largest body a single frame may carry (64 MiB).
pub const MAX_BODY_LEN: usize = 64 * 1024 * 1024;

/// Registered message kinds of protocol v1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Kind {
    Auth = 0x01,
    AuthOk = 0x02,
    Error = 0x03,
    CatRegister = 0x10,
    CatResolve = 0x11,
    CatList = 0x12,
    SubQuery = 0x20,
    ResultSet = 0x21,
    JobSubmit = 0x30,
    JobStatus = 0x31,
    JobResult = 0x32,
    FetchImage = 0x40,
    ImageData = 0x41,
    Ingest = 0x50,
    IngestReport = 0x51,
}

impl Kind {
    pub const ALL: [Kind; 15] = [
        Kind::Auth,
        Kind::AuthOk,
        Kind::Error,
        Kind::CatRegister,
        Kind::CatResolve,
        Kind::CatList,
        Kind::SubQuery,
        Kind::ResultSet,
        Kind::JobSubmit,
        Kind::JobStatus,
        Kind::JobResult,
        Kind::FetchImage,
        Kind::ImageData,
        Kind::Ingest,
        Kind::IngestReport,
    ];

    pub fn from_u8(code: u8) -> Option<Kind> {
        Kind::ALL.iter().copied().find(|k| *k as u8 == code)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Auth => "AUTH",
            Kind::AuthOk => "AUTH_OK",
            Kind::Error => "ERROR",
            Kind::CatRegister => "CAT_REGISTER",
            Kind::CatResolve => "CAT_RESOLVE",
            Kind::CatList => "CAT_LIST",
            Kind::SubQuery => "SUBQUERY",
            Kind::ResultSet => "RESULTSET",
            Kind::JobSubmit => "JOB_SUBMIT",
            Kind::JobStatus => "JOB_STATUS",
            Kind::JobResult => "JOB_RESULT",
            Kind::FetchImage => "FETCH_IMAGE",
            Kind::ImageData => "IMAGE_DATA",
            Kind::Ingest => "INGEST",
            Kind::IngestReport => "INGEST_REPORT",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(0x{:02X})", self.name(), self.code())
    }
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("truncated frame: header declares {declared} body bytes, {available} available")]
    Truncated { declared: usize, available: usize },
    #[error("unknown message kind 0x{0:02X}")]
    UnknownKind(u8),
    #[error("malformed frame body: {0}")]
    MalformedBody(String),
    #[error("frame body of {0} bytes exceeds the 64 MiB limit")]
    Oversize(usize),
}

/// One decoded protocol frame. The body is guaranteed to be valid JSON
/// (or empty).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    kind: Kind,
    body: String,
}

impl Frame {
    pub fn new(kind: Kind, body: impl Into<String>) -> Result<Self, CodecError> {
        let body = body.into();
        check_body(body.as_bytes())?;
        Ok(Frame { kind, body })
    }

    pub fn from_message<T: Serialize + ?Sized>(kind: Kind, msg: &T) -> Result<Self, CodecError> {
        let body =
            serde_json::to_string(msg).map_err(|e| CodecError::MalformedBody(e.to_string()))?;
        if body.len() > MAX_BODY_LEN {
            return Err(CodecError::Oversize(body.len()));
        }
        Ok(Frame { kind, body })
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Deserialize the body into a typed message. An empty body reads as `null`.
    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, CodecError> {
        let text = if self.body.is_empty() { "null" } else { &self.body };
        serde_json::from_str(text).map_err(|e| CodecError::MalformedBody(e.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len());
        out.extend_from_slice(&(self.body.len() as u32).to_be_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(self.body.as_bytes());
        out
    }
}

fn check_body(bytes: &[u8]) -> Result<(), CodecError> {
    if bytes.len() > MAX_BODY_LEN {
        return Err(CodecError::Oversize(bytes.len()));
    }
    if bytes.is_empty() {
        return Ok(());
    }
    serde_json::from_slice::<IgnoredAny>(bytes)
        .map(|_| ())
        .map_err(|e| CodecError::MalformedBody(e.to_string()))
}

pub fn encode_frame(kind: Kind, body: &str) -> Result<Vec<u8>, CodecError> {
    Ok(Frame::new(kind, body)?.encode())
}

/// Decodes one frame from the front of `bytes`, returning it together with
/// the number of bytes consumed (`5 + length`).
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated {
            declared: 0,
            available: bytes.len(),
        });
    }
    let declared = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let kind = Kind::from_u8(bytes[4]).ok_or(CodecError::UnknownKind(bytes[4]))?;
    if declared > MAX_BODY_LEN {
        return Err(CodecError::Oversize(declared));
    }
    let available = bytes.len() - HEADER_LEN;
    if available < declared {
        return Err(CodecError::Truncated {
            declared,
            available,
        });
    }
    let body = &bytes[HEADER_LEN..HEADER_LEN + declared];
    check_body(body)?;
    let body = std::str::from_utf8(body)
        .map_err(|e| CodecError::MalformedBody(e.to_string()))?
        .to_owned();
    Ok((Frame { kind, body }, HEADER_LEN + declared))
}

/// Reads one frame from a stream. Returns `Ok(None)` on a clean end of
/// stream at a frame boundary.
pub fn read_frame<R: Read>(reader: &mut R) -> crate::Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(CodecError::Truncated {
                    declared: 0,
                    available: filled,
                }
                .into())
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let declared = u32::from_be_bytes([header[0], header[1], header[2], header[3]]) as usize;
    let kind = Kind::from_u8(header[4]).ok_or(CodecError::UnknownKind(header[4]))?;
    if declared > MAX_BODY_LEN {
        return Err(CodecError::Oversize(declared).into());
    }
    let mut body = vec![0u8; declared];
    let mut got = 0;
    while got < declared {
        match reader.read(&mut body[got..]) {
            Ok(0) => {
                return Err(CodecError::Truncated {
                    declared,
                    available: got,
                }
                .into())
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    check_body(&body)?;
    let body = String::from_utf8(body).map_err(|e| CodecError::MalformedBody(e.to_string()))?;
    Ok(Some(Frame { kind, body }))
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &Frame) -> io::Result<()> {
    writer.write_all(&frame.encode())?;
    writer.flush()
}
