//! Blocking TCP transport: one thread per connection, strict
//! request/reply, `AUTH` mandatory as the first frame.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tracing::{debug, warn};

use super::auth::{authenticate, AuthOk, Credentials, Roster, Session};
use super::frame::{read_frame, write_frame, Frame, Kind};
use super::{ErrorCode, ErrorReply};
use crate::{Error, Result};

pub const DEFAULT_IO_TIMEOUT: Duration = Duration::from_secs(120);

/// Opens outbound connections. Swappable so tests can observe or forbid
/// network access.
pub trait Dialer: Send + Sync {
    fn dial(&self, addr: &str) -> std::io::Result<TcpStream>;
}

#[derive(Debug, Clone)]
pub struct TcpDialer {
    pub connect_timeout: Duration,
    pub io_timeout: Duration,
}

impl Default for TcpDialer {
    fn default() -> Self {
        TcpDialer {
            connect_timeout: Duration::from_secs(3),
            io_timeout: DEFAULT_IO_TIMEOUT,
        }
    }
}

impl Dialer for TcpDialer {
    fn dial(&self, addr: &str) -> std::io::Result<TcpStream> {
        let mut last = None;
        for sock in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&sock, self.connect_timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(self.io_timeout))?;
                    stream.set_write_timeout(Some(self.io_timeout))?;
                    stream.set_nodelay(true)?;
                    return Ok(stream);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("no address for {addr}"))
        }))
    }
}

/// An authenticated client connection.
pub struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    peer: AuthOk,
}

impl Connection {
    pub fn open(dialer: &dyn Dialer, addr: &str, creds: &Credentials) -> Result<Connection> {
        let stream = dialer.dial(addr)?;
        let mut conn = Connection {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            peer: AuthOk {
                node_id: String::new(),
                role: super::Role::Node,
            },
        };
        let reply = conn.round_trip(Frame::from_message(Kind::Auth, &creds.token())?)?;
        match reply.kind() {
            Kind::AuthOk => conn.peer = reply.parse()?,
            other => {
                return Err(Error::malformed(format!(
                    "expected AUTH_OK, peer sent {other}"
                )))
            }
        }
        Ok(conn)
    }

    /// The identity the peer's server granted this session.
    pub fn session(&self) -> &AuthOk {
        &self.peer
    }

    /// Sends one frame and waits for the reply. `ERROR` replies become
    /// `Error::Remote`.
    pub fn round_trip(&mut self, frame: Frame) -> Result<Frame> {
        write_frame(&mut self.writer, &frame)?;
        let reply = read_frame(&mut self.reader)?.ok_or_else(|| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "peer closed the connection",
            ))
        })?;
        if reply.kind() == Kind::Error {
            return Err(Error::Remote(reply.parse::<ErrorReply>()?));
        }
        Ok(reply)
    }

    /// Typed request expecting a reply of `expect` kind.
    pub fn call<Req, Resp>(&mut self, kind: Kind, req: &Req, expect: Kind) -> Result<Resp>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        let reply = self.round_trip(Frame::from_message(kind, req)?)?;
        if reply.kind() != expect {
            return Err(Error::malformed(format!(
                "expected {expect} reply to {kind}, got {}",
                reply.kind()
            )));
        }
        Ok(reply.parse()?)
    }
}

/// Server-side request handler.
pub trait Service: Send + Sync + 'static {
    fn handle(&self, session: &Session, frame: Frame) -> Result<Frame>;
}

/// Running server; dropping it does not stop the server, call [`shutdown`].
///
/// [`shutdown`]: ServerHandle::shutdown
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<HashMap<u64, TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and severs every live connection.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
        for (_, stream) in self.conns.lock().unwrap().drain() {
            let _ = stream.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn serve(listener: TcpListener, roster: Arc<Roster>, service: Arc<dyn Service>) -> ServerHandle {
    let addr = listener.local_addr().expect("bound listener has an address");
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<HashMap<u64, TcpStream>>> = Arc::default();
    let next_id = AtomicU64::new(0);
    let accept = {
        let stop = stop.clone();
        let conns = conns.clone();
        thread::Builder::new()
            .name(format!("accept-{addr}"))
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match stream {
                        Ok(s) => s,
                        Err(e) => {
                            warn!(%addr, error = %e, "accept failed");
                            continue;
                        }
                    };
                    let id = next_id.fetch_add(1, Ordering::Relaxed);
                    if let Ok(clone) = stream.try_clone() {
                        conns.lock().unwrap().insert(id, clone);
                    }
                    let roster = roster.clone();
                    let service = service.clone();
                    let conns = conns.clone();
                    let spawned = thread::Builder::new()
                        .name(format!("conn-{addr}-{id}"))
                        .spawn(move || {
                            if let Err(e) = handle_connection(stream, &roster, service.as_ref()) {
                                debug!(%addr, error = %e, "connection ended");
                            }
                            conns.lock().unwrap().remove(&id);
                        });
                    if let Err(e) = spawned {
                        warn!(error = %e, "could not spawn connection thread");
                    }
                }
            })
            .expect("spawn accept thread")
    };
    ServerHandle {
        addr,
        stop,
        conns,
        accept: Some(accept),
    }
}

fn handle_connection(stream: TcpStream, roster: &Roster, service: &dyn Service) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);

    let Some(first) = read_frame(&mut reader)? else {
        return Ok(());
    };
    if first.kind() != Kind::Auth {
        let reply = ErrorReply {
            code: ErrorCode::Unauthorized,
            detail: format!("{} before AUTH", first.kind()),
        };
        write_frame(&mut writer, &reply.frame())?;
        return Err(Error::Unauthorized(reply.detail));
    }
    let session = match first.parse().map_err(Error::from).and_then(|t| authenticate(&t, roster)) {
        Ok(session) => session,
        Err(e) => {
            write_frame(&mut writer, &e.to_reply().frame())?;
            return Err(e);
        }
    };
    let ok = AuthOk {
        node_id: session.node_id.clone(),
        role: session.role,
    };
    write_frame(&mut writer, &Frame::from_message(Kind::AuthOk, &ok)?)?;
    debug!(peer = %session.node_id, "session established");

    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(frame)) => frame,
            Ok(None) => return Ok(()),
            Err(e) => {
                let _ = write_frame(&mut writer, &e.to_reply().frame());
                return Err(e);
            }
        };
        debug!(peer = %session.node_id, kind = %frame.kind(), "request");
        let reply = match service.handle(&session, frame) {
            Ok(reply) => reply,
            Err(e) => e.to_reply().frame(),
        };
        write_frame(&mut writer, &reply)?;
    }
}
