//! The grid-box's wire face: sub-queries, federated queries, jobs, image
//! fetches, ingest requests and read-only catalogue lookups.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::{FetchRequest, Invocation, JobResult, JobSpec, Node, NodeApi};
use crate::catalogue::{ListRequest, ResolveRequest};
use crate::mediator::{Mediator, SubQuery};
use crate::proto::{ErrorReply, Frame, Kind, Role, Service, Session};
use crate::{Error, Result};

/// Body of `SUBQUERY`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum QueryRequest {
    /// Evaluate against the receiving node's records only.
    Local(SubQuery),
    /// Mediate across the federation from the receiving node.
    Federated { query: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobScope {
    Local,
    Federated,
}

/// Body of `JOB_SUBMIT`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSubmit {
    pub spec: JobSpec,
    pub scope: JobScope,
    /// Overrides the node's placement threshold for this job.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Done,
}

/// Body of `JOB_STATUS` replies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
}

/// Body of `JOB_STATUS` requests. The reply is `JOB_RESULT` once the job
/// has finished (the result is handed over exactly once), `ERROR` if it
/// failed as a whole, and `JOB_STATUS` if it is still running after
/// `wait_ms`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatusRequest {
    pub job_id: String,
    #[serde(default)]
    pub wait_ms: u64,
}

/// Body of `INGEST`: a container file on the node's own filesystem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestRequest {
    pub path: PathBuf,
}

const MAX_WAIT: Duration = Duration::from_secs(30);

enum Slot {
    Running,
    Finished(std::result::Result<JobResult, ErrorReply>),
}

#[derive(Default)]
struct JobTable {
    jobs: Mutex<HashMap<String, Slot>>,
    changed: Condvar,
}

impl JobTable {
    fn start(&self, job_id: &str) -> Result<()> {
        let mut jobs = self.jobs.lock().unwrap();
        if jobs.contains_key(job_id) {
            return Err(Error::conflict(format!("job {job_id} already exists")));
        }
        jobs.insert(job_id.to_owned(), Slot::Running);
        Ok(())
    }

    fn finish(&self, job_id: &str, outcome: std::result::Result<JobResult, ErrorReply>) {
        self.jobs.lock().unwrap().insert(job_id.to_owned(), Slot::Finished(outcome));
        self.changed.notify_all();
    }

    /// Waits up to `wait` for the job to finish; a finished job leaves the table.
    fn take(&self, job_id: &str, wait: Duration) -> Result<Option<std::result::Result<JobResult, ErrorReply>>> {
        let deadline = Instant::now() + wait;
        let mut jobs = self.jobs.lock().unwrap();
        loop {
            match jobs.get(job_id) {
                None => return Err(Error::not_found(format!("no job {job_id}"))),
                Some(Slot::Finished(_)) => match jobs.remove(job_id) {
                    Some(Slot::Finished(outcome)) => return Ok(Some(outcome)),
                    _ => unreachable!("slot was finished under the same lock"),
                },
                Some(Slot::Running) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Ok(None);
                    }
                    jobs = self.changed.wait_timeout(jobs, deadline - now).unwrap().0;
                }
            }
        }
    }
}

pub struct NodeService {
    node: Arc<Node>,
    members: BTreeMap<String, Arc<dyn NodeApi>>,
    threshold: u64,
    jobs: Arc<JobTable>,
    job_seq: AtomicU64,
}

impl NodeService {
    /// `peers` are the other grid-boxes of the federation; the node itself
    /// is always a member.
    pub fn new(node: Arc<Node>, peers: BTreeMap<String, Arc<dyn NodeApi>>, threshold: u64) -> NodeService {
        let mut members = peers;
        members.insert(node.id().to_owned(), node.clone() as Arc<dyn NodeApi>);
        NodeService {
            node,
            members,
            threshold,
            jobs: Arc::default(),
            job_seq: AtomicU64::new(0),
        }
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    /// A mediator over the current membership, checking queries against
    /// this node's schemas.
    pub fn mediator(&self) -> Mediator {
        Mediator::new(
            self.node.id(),
            self.members.clone(),
            self.node.catalogue().clone(),
            self.node.registry(),
            self.threshold,
        )
    }

    fn next_job_id(&self) -> String {
        let seq = self.job_seq.fetch_add(1, Ordering::Relaxed);
        format!("{}-{}-{seq:04}", self.node.id(), Utc::now().format("%Y%m%d%H%M%S%3f"))
    }

    fn submit(&self, session: &Session, mut req: JobSubmit) -> Result<JobStatus> {
        Invocation::from_spec(&req.spec)?;
        if req.spec.job_id.is_empty() {
            req.spec.job_id = self.next_job_id();
        }
        if req.spec.requester.is_empty() {
            req.spec.requester = match req.scope {
                JobScope::Federated => self.node.id().to_owned(),
                JobScope::Local => session.node_id.clone(),
            };
        }
        let job_id = req.spec.job_id.clone();
        self.jobs.start(&job_id)?;
        info!(node = %self.node.id(), %job_id, scope = ?req.scope, inputs = req.spec.inputs.len(), "job accepted");
        let task: Box<dyn FnOnce() -> Result<JobResult> + Send> = match req.scope {
            JobScope::Local => {
                let node = self.node.clone();
                Box::new(move || node.run_job(&req.spec))
            }
            JobScope::Federated => {
                let mediator = self.mediator().with_threshold(req.threshold_bytes.unwrap_or(self.threshold));
                Box::new(move || mediator.run_job(req.spec))
            }
        };
        let jobs = self.jobs.clone();
        let id = job_id.clone();
        std::thread::Builder::new()
            .name(format!("job-{job_id}"))
            .spawn(move || {
                let outcome = task().map_err(|e| {
                    warn!(job_id = %id, error = %e, "job failed");
                    e.to_reply()
                });
                jobs.finish(&id, outcome);
            })
            .map_err(|e| Error::internal(format!("cannot spawn job thread: {e}")))?;
        Ok(JobStatus {
            job_id,
            state: JobState::Running,
        })
    }
}

impl Service for NodeService {
    fn handle(&self, session: &Session, frame: Frame) -> Result<Frame> {
        match frame.kind() {
            Kind::SubQuery => {
                let rs = match frame.parse::<QueryRequest>()? {
                    QueryRequest::Local(sub) => {
                        if sub.target_node != self.node.id() {
                            return Err(Error::malformed(format!(
                                "sub-query for {} sent to {}",
                                sub.target_node,
                                self.node.id()
                            )));
                        }
                        self.node.local_query(&sub)?
                    }
                    QueryRequest::Federated { query } => self.mediator().query(&query)?,
                };
                Ok(Frame::from_message(Kind::ResultSet, &rs)?)
            }
            Kind::JobSubmit => {
                let status = self.submit(session, frame.parse()?)?;
                Ok(Frame::from_message(Kind::JobStatus, &status)?)
            }
            Kind::JobStatus => {
                let req: JobStatusRequest = frame.parse()?;
                let wait = Duration::from_millis(req.wait_ms).min(MAX_WAIT);
                match self.jobs.take(&req.job_id, wait)? {
                    Some(Ok(result)) => Ok(Frame::from_message(Kind::JobResult, &result)?),
                    Some(Err(reply)) => Err(Error::Remote(reply)),
                    None => Ok(Frame::from_message(
                        Kind::JobStatus,
                        &JobStatus {
                            job_id: req.job_id,
                            state: JobState::Running,
                        },
                    )?),
                }
            }
            Kind::FetchImage => {
                let req: FetchRequest = frame.parse()?;
                Ok(Frame::from_message(Kind::ImageData, &self.node.fetch_image(&req.lfn)?)?)
            }
            Kind::Ingest => {
                if session.role == Role::Node {
                    return Err(Error::Unauthorized(format!("{} may not submit ingests", session.node_id)));
                }
                let req: IngestRequest = frame.parse()?;
                Ok(Frame::from_message(Kind::IngestReport, &self.node.ingest_file(&req.path)?)?)
            }
            Kind::CatResolve => {
                let req: ResolveRequest = frame.parse()?;
                Ok(Frame::from_message(Kind::CatResolve, &self.node.catalogue().resolve(&req.lfn)?)?)
            }
            Kind::CatList => {
                let req: ListRequest = frame.parse()?;
                let page = self.node.catalogue().list(&req.prefix, req.limit, req.after.as_deref())?;
                Ok(Frame::from_message(Kind::CatList, &page)?)
            }
            other => Err(Error::malformed(format!("a grid-box does not serve {other}"))),
        }
    }
}
