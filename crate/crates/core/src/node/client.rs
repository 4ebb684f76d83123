//! Talking to a grid-box over the wire, as a peer node or as a client.

use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::service::{IngestRequest, JobScope, JobState, JobStatus, JobStatusRequest, JobSubmit, QueryRequest};
use super::{FetchRequest, ImageData, IngestReport, JobResult, JobSpec, NodeApi};
use crate::catalogue::{ListPage, ListRequest, LogicalFileName, ReplicaEntry, ResolveRequest};
use crate::mediator::{ResultSet, SubQuery};
use crate::proto::{Connection, Credentials, Dialer, Kind};
use crate::Result;

/// Idle connections kept per remote node.
const POOL_SIZE: usize = 4;
/// Long-poll interval while waiting for a job.
const POLL_MS: u64 = 10_000;

/// A remote grid-box. Connections are pooled; an idempotent request that
/// fails on a pooled connection is retried once on a fresh one.
pub struct NodeClient {
    node_id: String,
    addr: String,
    dialer: Arc<dyn Dialer>,
    creds: Credentials,
    idle: Mutex<Vec<Connection>>,
}

impl NodeClient {
    pub fn new(node_id: impl Into<String>, addr: impl Into<String>, dialer: Arc<dyn Dialer>, creds: Credentials) -> Self {
        NodeClient {
            node_id: node_id.into(),
            addr: addr.into(),
            dialer,
            creds,
            idle: Mutex::new(Vec::new()),
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn with_conn<T>(&self, idempotent: bool, mut f: impl FnMut(&mut Connection) -> Result<T>) -> Result<T> {
        let pooled = self.idle.lock().unwrap().pop();
        let reused = pooled.is_some();
        let mut conn = match pooled {
            Some(c) => c,
            None => Connection::open(self.dialer.as_ref(), &self.addr, &self.creds)?,
        };
        let mut out = f(&mut conn);
        if let Err(e) = &out {
            if !e.is_connectivity() {
                self.release(conn);
                return out;
            }
            if !(reused && idempotent) {
                return out;
            }
            conn = Connection::open(self.dialer.as_ref(), &self.addr, &self.creds)?;
            out = f(&mut conn);
            if out.as_ref().is_err_and(|e| e.is_connectivity()) {
                return out;
            }
        }
        self.release(conn);
        out
    }

    fn release(&self, conn: Connection) {
        let mut idle = self.idle.lock().unwrap();
        if idle.len() < POOL_SIZE {
            idle.push(conn);
        }
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(&self, idempotent: bool, kind: Kind, req: &Req, expect: Kind) -> Result<Resp> {
        self.with_conn(idempotent, |c| c.call(kind, req, expect))
    }

    /// Runs `text` across the federation, mediated by this node.
    pub fn federated_query(&self, text: &str) -> Result<ResultSet> {
        let req = QueryRequest::Federated { query: text.to_owned() };
        self.call(true, Kind::SubQuery, &req, Kind::ResultSet)
    }

    pub fn submit_job(&self, submit: &JobSubmit) -> Result<JobStatus> {
        self.call(false, Kind::JobSubmit, submit, Kind::JobStatus)
    }

    /// Blocks until the job finishes. Uses one connection throughout so a
    /// dropped link surfaces instead of being retried.
    pub fn wait_job(&self, job_id: &str) -> Result<JobResult> {
        let req = JobStatusRequest {
            job_id: job_id.to_owned(),
            wait_ms: POLL_MS,
        };
        self.with_conn(false, |conn| loop {
            let reply = conn.round_trip(crate::proto::Frame::from_message(Kind::JobStatus, &req)?)?;
            match reply.kind() {
                Kind::JobResult => return Ok(reply.parse()?),
                Kind::JobStatus => {
                    let status: JobStatus = reply.parse()?;
                    debug_assert_eq!(status.state, JobState::Running);
                }
                other => return Err(crate::Error::malformed(format!("unexpected {other} while waiting for a job"))),
            }
        })
    }

    /// Submits a job for federation-wide placement at this node and waits.
    pub fn run_federated_job(&self, spec: JobSpec, threshold_bytes: Option<u64>) -> Result<JobResult> {
        let status = self.submit_job(&JobSubmit {
            spec,
            scope: JobScope::Federated,
            threshold_bytes,
        })?;
        self.wait_job(&status.job_id)
    }

    pub fn ingest(&self, path: impl Into<std::path::PathBuf>) -> Result<IngestReport> {
        self.call(false, Kind::Ingest, &IngestRequest { path: path.into() }, Kind::IngestReport)
    }

    pub fn resolve(&self, lfn: &LogicalFileName) -> Result<Vec<ReplicaEntry>> {
        self.call(true, Kind::CatResolve, &ResolveRequest { lfn: lfn.clone() }, Kind::CatResolve)
    }

    pub fn list(&self, prefix: &str, limit: usize, after: Option<&str>) -> Result<ListPage> {
        let req = ListRequest {
            prefix: prefix.to_owned(),
            limit,
            after: after.map(str::to_owned),
        };
        self.call(true, Kind::CatList, &req, Kind::CatList)
    }
}

impl NodeApi for NodeClient {
    fn node_id(&self) -> &str {
        &self.node_id
    }

    fn local_query(&self, sub: &SubQuery) -> Result<ResultSet> {
        self.call(true, Kind::SubQuery, &QueryRequest::Local(sub.clone()), Kind::ResultSet)
    }

    fn run_job(&self, spec: &JobSpec) -> Result<JobResult> {
        let status = self.submit_job(&JobSubmit {
            spec: spec.clone(),
            scope: JobScope::Local,
            threshold_bytes: None,
        })?;
        self.wait_job(&status.job_id)
    }

    fn fetch_image(&self, lfn: &LogicalFileName) -> Result<ImageData> {
        self.call(true, Kind::FetchImage, &FetchRequest { lfn: lfn.clone() }, Kind::ImageData)
    }
}
