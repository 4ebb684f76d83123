//! An in-process federation on loopback sockets: one catalogue service and
//! N grid-boxes, each behind an optional recording proxy so every byte that
//! crosses a federation link can be inspected afterwards.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tempfile::TempDir;
use tracing::debug;

use crate::anonymizer::SiteKey;
use crate::catalogue::{Catalogue, CatalogueClient, CatalogueService, Durability};
use crate::node::{Node, NodeApi, NodeClient, NodeOptions, NodeService};
use crate::proto::{decode_frame, serve, Credentials, Dialer, Frame, Role, Roster, ServerHandle, TcpDialer};
use crate::Result;

pub const CATALOGUE_ID: &str = "catalogue";
pub const CLIENT_ID: &str = "operator";

#[derive(Debug, Clone)]
pub struct TestbedOptions {
    pub nodes: usize,
    /// Put a recording proxy in front of every service.
    pub record: bool,
    pub durability: Durability,
    pub threshold_bytes: u64,
    pub workers: usize,
}

impl Default for TestbedOptions {
    fn default() -> Self {
        TestbedOptions {
            nodes: 3,
            record: false,
            durability: Durability::Flush,
            threshold_bytes: 10 << 20,
            workers: 4,
        }
    }
}

/// One captured byte stream: everything sent in one direction over one
/// proxied connection.
#[derive(Debug, Clone)]
pub struct Capture {
    /// `"<client addr> -> <service>"` or the reverse.
    pub link: String,
    pub bytes: Vec<u8>,
}

impl Capture {
    /// Splits the stream into frames; a torn tail (severed link) is dropped.
    pub fn frames(&self) -> Vec<Frame> {
        let mut rest = self.bytes.as_slice();
        let mut out = Vec::new();
        while let Ok((frame, used)) = decode_frame(rest) {
            out.push(frame);
            rest = &rest[used..];
        }
        out
    }
}

/// Bytes captured on one link, appended by its proxy.
type Stream = Arc<Mutex<Vec<u8>>>;

/// Shared sink for every proxy of a testbed.
#[derive(Default)]
pub struct Recorder {
    streams: Mutex<Vec<(String, Stream)>>,
}

impl Recorder {
    fn open_stream(&self, link: String) -> Stream {
        let buf = Arc::new(Mutex::new(Vec::new()));
        self.streams.lock().unwrap().push((link, buf.clone()));
        buf
    }

    pub fn captures(&self) -> Vec<Capture> {
        self.streams
            .lock()
            .unwrap()
            .iter()
            .map(|(link, buf)| Capture {
                link: link.clone(),
                bytes: buf.lock().unwrap().clone(),
            })
            .collect()
    }

    pub fn total_bytes(&self) -> usize {
        self.streams.lock().unwrap().iter().map(|(_, b)| b.lock().unwrap().len()).sum()
    }
}

/// Forwards a listening address to an upstream one, recording both
/// directions into a [`Recorder`].
pub struct RecordingProxy {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    live: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl RecordingProxy {
    pub fn start(listener: TcpListener, name: String, upstream: SocketAddr, recorder: Arc<Recorder>) -> RecordingProxy {
        let addr = listener.local_addr().expect("bound listener has an address");
        let stop = Arc::new(AtomicBool::new(false));
        let live: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let accept = {
            let (stop, live) = (stop.clone(), live.clone());
            thread::spawn(move || {
                for inbound in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(inbound) = inbound else { continue };
                    let Ok(outbound) = TcpStream::connect_timeout(&upstream, Duration::from_secs(2)) else {
                        let _ = inbound.shutdown(Shutdown::Both);
                        continue;
                    };
                    let peer = inbound.peer_addr().map(|a| a.to_string()).unwrap_or_default();
                    let mut live = live.lock().unwrap();
                    for s in [&inbound, &outbound] {
                        if let Ok(c) = s.try_clone() {
                            live.push(c);
                        }
                    }
                    let up = recorder.open_stream(format!("{peer} -> {name}"));
                    let down = recorder.open_stream(format!("{name} -> {peer}"));
                    pump(&inbound, &outbound, up);
                    pump(&outbound, &inbound, down);
                }
            })
        };
        RecordingProxy {
            addr,
            stop,
            live,
            accept: Some(accept),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and severs every forwarded connection.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for s in self.live.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for RecordingProxy {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn pump(from: &TcpStream, to: &TcpStream, sink: Arc<Mutex<Vec<u8>>>) {
    let (Ok(mut from), Ok(mut to)) = (from.try_clone(), to.try_clone()) else {
        return;
    };
    thread::spawn(move || {
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            match from.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    sink.lock().unwrap().extend_from_slice(&buf[..n]);
                    if to.write_all(&buf[..n]).is_err() {
                        break;
                    }
                }
            }
        }
        let _ = to.shutdown(Shutdown::Write);
    });
}

struct Member {
    node: Arc<Node>,
    service: Arc<NodeService>,
    server: ServerHandle,
    proxy: Option<RecordingProxy>,
    public: String,
}

pub struct Testbed {
    root: TempDir,
    roster: Arc<Roster>,
    catalogue: Arc<Catalogue>,
    catalogue_server: ServerHandle,
    catalogue_proxy: Option<RecordingProxy>,
    members: BTreeMap<String, Member>,
    recorder: Option<Arc<Recorder>>,
    dialer: Arc<dyn Dialer>,
    client_creds: Credentials,
}

fn secret_for(id: &str) -> String {
    format!("{id}-secret")
}

fn bind() -> Result<TcpListener> {
    Ok(TcpListener::bind("127.0.0.1:0")?)
}

impl Testbed {
    /// Starts the catalogue and `opts.nodes` grid-boxes named `node-a`,
    /// `node-b`, ... with all state under a fresh temporary directory.
    pub fn start(opts: TestbedOptions) -> Result<Testbed> {
        let root = tempfile::Builder::new().prefix("gridbox-testbed").tempdir()?;
        let recorder = opts.record.then(Arc::<Recorder>::default);
        let ids: Vec<String> = (0..opts.nodes).map(|i| format!("node-{}", (b'a' + i as u8) as char)).collect();

        // Bind everything first so the roster can carry final addresses.
        let cat_listener = bind()?;
        let cat_proxy_listener = if opts.record { Some(bind()?) } else { None };
        let mut listeners = Vec::new();
        for _ in &ids {
            let direct = bind()?;
            let proxy = if opts.record { Some(bind()?) } else { None };
            listeners.push((direct, proxy));
        }
        let public = |direct: &TcpListener, proxy: &Option<TcpListener>| -> Result<String> {
            Ok(proxy.as_ref().unwrap_or(direct).local_addr()?.to_string())
        };
        let cat_public = public(&cat_listener, &cat_proxy_listener)?;

        let client_creds = Credentials::new(CLIENT_ID, secret_for(CLIENT_ID));
        let mut roster = Roster::default();
        roster.members.push(client_creds.roster_entry(Role::Client, None));
        for (id, (direct, proxy)) in ids.iter().zip(&listeners) {
            let creds = Credentials::new(id.clone(), secret_for(id));
            roster.members.push(creds.roster_entry(Role::Node, Some(public(direct, proxy)?)));
        }
        roster.save(&root.path().join("roster.json"))?;
        let roster = Arc::new(roster);

        let catalogue = Arc::new(Catalogue::open(root.path().join("catalogue.log"), opts.durability)?);
        let cat_upstream = cat_listener.local_addr()?;
        let catalogue_server = serve(cat_listener, roster.clone(), Arc::new(CatalogueService::new(catalogue.clone())));
        let catalogue_proxy = cat_proxy_listener
            .map(|l| RecordingProxy::start(l, CATALOGUE_ID.into(), cat_upstream, recorder.clone().expect("recording")));

        let dialer: Arc<dyn Dialer> = Arc::new(TcpDialer::default());
        let addrs = roster.nodes();
        let mut members = BTreeMap::new();
        for (id, (direct, proxy)) in ids.iter().zip(listeners) {
            let creds = Credentials::new(id.clone(), secret_for(id));
            let node = Arc::new(Node::open(
                NodeOptions {
                    node_id: id.clone(),
                    data_dir: root.path().join(id),
                    site_key: SiteKey::generate(),
                    workers: opts.workers,
                },
                Arc::new(CatalogueClient::new(dialer.clone(), cat_public.clone(), creds.clone())),
            )?);
            let peers: BTreeMap<String, Arc<dyn NodeApi>> = addrs
                .iter()
                .filter(|(peer, _)| *peer != id)
                .map(|(peer, addr)| {
                    let client: Arc<dyn NodeApi> =
                        Arc::new(NodeClient::new(peer.clone(), addr.clone(), dialer.clone(), creds.clone()));
                    (peer.clone(), client)
                })
                .collect();
            let service = Arc::new(NodeService::new(node.clone(), peers, opts.threshold_bytes));
            let upstream = direct.local_addr()?;
            let public = addrs[id].clone();
            let server = serve(direct, roster.clone(), service.clone());
            let proxy = proxy.map(|l| RecordingProxy::start(l, id.clone(), upstream, recorder.clone().expect("recording")));
            debug!(node = %id, %public, "testbed node up");
            members.insert(
                id.clone(),
                Member {
                    node,
                    service,
                    server,
                    proxy,
                    public,
                },
            );
        }
        Ok(Testbed {
            root,
            roster,
            catalogue,
            catalogue_server,
            catalogue_proxy,
            members,
            recorder,
            dialer,
            client_creds,
        })
    }

    pub fn root(&self) -> &Path {
        self.root.path()
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.members.keys().cloned().collect()
    }

    pub fn node(&self, id: &str) -> &Arc<Node> {
        &self.members[id].node
    }

    pub fn service(&self, id: &str) -> &Arc<NodeService> {
        &self.members[id].service
    }

    /// The address clients and peers use to reach `id`.
    pub fn addr(&self, id: &str) -> &str {
        &self.members[id].public
    }

    /// Direct handle on the catalogue state, bypassing the wire.
    pub fn catalogue(&self) -> &Arc<Catalogue> {
        &self.catalogue
    }

    pub fn catalogue_addr(&self) -> String {
        match &self.catalogue_proxy {
            Some(p) => p.addr().to_string(),
            None => self.catalogue_server.local_addr().to_string(),
        }
    }

    pub fn client_credentials(&self) -> &Credentials {
        &self.client_creds
    }

    /// An operator client talking to `id` over the wire.
    pub fn client(&self, id: &str) -> NodeClient {
        NodeClient::new(id, self.addr(id), self.dialer.clone(), self.client_creds.clone())
    }

    pub fn recorder(&self) -> Option<&Arc<Recorder>> {
        self.recorder.as_ref()
    }

    /// Takes `id` off the network: its server and proxy stop and every
    /// connection to it is severed. Its state stays on disk.
    pub fn stop_node(&mut self, id: &str) {
        if let Some(m) = self.members.get_mut(id) {
            if let Some(p) = m.proxy.as_mut() {
                p.shutdown();
            }
            m.server.shutdown();
        }
    }

    /// Per-node site directories, for locality checks.
    pub fn data_dirs(&self) -> HashMap<String, std::path::PathBuf> {
        self.members.iter().map(|(id, m)| (id.clone(), m.node.data_dir().to_path_buf())).collect()
    }
}

impl Drop for Testbed {
    fn drop(&mut self) {
        for m in self.members.values_mut() {
            if let Some(p) = m.proxy.as_mut() {
                p.shutdown();
            }
            m.server.shutdown();
        }
        if let Some(p) = self.catalogue_proxy.as_mut() {
            p.shutdown();
        }
        self.catalogue_server.shutdown();
    }
}
