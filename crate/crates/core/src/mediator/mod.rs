//! Federated query handling and job placement. A mediator runs inside the
//! requesting node: it checks a query against the local schemas, fans the
//! identical sub-query out to every member, merges the answers, and for
//! analysis jobs decides per input whether to move the computation or the
//! data.

mod placement;
mod query;
mod result;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::Value;
use tracing::warn;

use crate::catalogue::{CatalogueApi, Checksum, LogicalFileName, ReplicaEntry};
use crate::metamodel::SchemaRegistry;
use crate::node::{Invocation, JobEntry, JobResult, JobSpec, NodeApi, Outcome};
use crate::{Error, Result};

pub use placement::{bytes_moved, decide, place_job, Placement, PlacementChoice, PlacementDecision};
pub use query::{check_predicate, check_query, parse_query, token_offset, CmpOp, Literal, Predicate, Query};
pub use result::{evaluate_local, merge_results, ResultSet, Row, SubQuery};

/// Splits `q` into one identical sub-query per target: every roster node,
/// or the roster nodes named in the query's site filter.
pub fn decompose(q: &Query, roster: &BTreeSet<String>) -> Result<Vec<SubQuery>> {
    if roster.is_empty() {
        return Err(Error::EmptyFederation);
    }
    let wanted: Option<BTreeSet<&String>> = q.site_filter.as_ref().map(|f| f.iter().collect());
    Ok(roster
        .iter()
        .filter(|n| wanted.as_ref().is_none_or(|w| w.contains(n)))
        .map(|n| SubQuery {
            target_node: n.clone(),
            kind: q.kind.clone(),
            predicate: q.predicate.clone(),
            projection: q.projection.clone(),
        })
        .collect())
}

/// Upper bound on concurrent fetch-and-run tasks at the requester.
const FETCH_PARALLELISM: usize = 4;

pub struct Mediator {
    requester: String,
    members: BTreeMap<String, Arc<dyn NodeApi>>,
    catalogue: Arc<dyn CatalogueApi>,
    registry: SchemaRegistry,
    threshold: u64,
}

impl Mediator {
    /// `members` must include the requester itself.
    pub fn new(
        requester: impl Into<String>,
        members: BTreeMap<String, Arc<dyn NodeApi>>,
        catalogue: Arc<dyn CatalogueApi>,
        registry: SchemaRegistry,
        threshold: u64,
    ) -> Mediator {
        Mediator {
            requester: requester.into(),
            members,
            catalogue,
            registry,
            threshold,
        }
    }

    pub fn requester(&self) -> &str {
        &self.requester
    }

    pub fn with_threshold(mut self, threshold: u64) -> Mediator {
        self.threshold = threshold;
        self
    }

    pub fn query(&self, text: &str) -> Result<ResultSet> {
        self.execute(&parse_query(text)?)
    }

    /// Runs `q` on every targeted member concurrently and merges the
    /// answers. Members that fail are reported as unreachable.
    pub fn execute(&self, q: &Query) -> Result<ResultSet> {
        check_query(q, &self.registry)?;
        let roster: BTreeSet<String> = self.members.keys().cloned().collect();
        let subs = decompose(q, &roster)?;
        let mut parts: Vec<ResultSet> = std::thread::scope(|scope| {
            let handles: Vec<_> = subs
                .iter()
                .map(|sub| {
                    let member = &self.members[&sub.target_node];
                    scope.spawn(move || match member.local_query(sub) {
                        Ok(rs) => rs,
                        Err(e) => {
                            warn!(node = %sub.target_node, error = %e, "sub-query failed");
                            let mut down = ResultSet::empty(sub.kind.clone(), sub.projection.clone());
                            down.unreachable.push(sub.target_node.clone());
                            down
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sub-query thread panicked")).collect()
        });
        if parts.is_empty() {
            parts.push(ResultSet::empty(q.kind.clone(), q.projection.clone()));
        }
        merge_results(parts)
    }

    /// The `lfn` column of an image query, for selecting job inputs.
    pub fn select_inputs(&self, text: &str) -> Result<(Vec<LogicalFileName>, ResultSet)> {
        let mut q = parse_query(text)?;
        if q.kind != "image" {
            return Err(Error::malformed("job inputs must be selected with an image query"));
        }
        q.projection = None;
        let rs = self.execute(&q)?;
        let lfns = rs
            .rows
            .iter()
            .filter_map(|r| r.values.get("lfn").and_then(Value::as_str))
            .map(LogicalFileName::new)
            .collect::<Result<BTreeSet<_>>>()?;
        Ok((lfns.into_iter().collect(), rs))
    }

    /// Places and runs a job across the federation and gathers one entry
    /// per input.
    pub fn run_job(&self, mut spec: JobSpec) -> Result<JobResult> {
        let invocation = Invocation::from_spec(&spec)?;
        if spec.requester.is_empty() {
            spec.requester = self.requester.clone();
        }
        let (decision, replicas) = place_job(&spec.inputs, self.catalogue.as_ref(), self.threshold)?;

        let mut remote: BTreeMap<String, Vec<LogicalFileName>> = BTreeMap::new();
        let mut shipped = Vec::new();
        for choice in &decision.choices {
            match &choice.placement {
                Placement::ExecuteAtData { node } => remote.entry(node.clone()).or_default().push(choice.lfn.clone()),
                Placement::ReplicateToRequester => shipped.push(choice.lfn.clone()),
            }
        }

        let unreachable = Mutex::new(BTreeSet::new());
        let entries = Mutex::new(Vec::new());
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for (node, inputs) in &remote {
                let sub = JobSpec {
                    job_id: format!("{}@{node}", spec.job_id),
                    algorithm: spec.algorithm.clone(),
                    inputs: inputs.clone(),
                    requester: spec.requester.clone(),
                    params: spec.params.clone(),
                };
                let (unreachable, entries) = (&unreachable, &entries);
                scope.spawn(move || {
                    let got = match self.members.get(node) {
                        Some(member) => member.run_job(&sub),
                        None => Err(Error::not_found(format!("{node} is not a federation member"))),
                    };
                    let mut out = entries.lock().unwrap();
                    match got {
                        Ok(result) => out.extend(result.entries),
                        Err(e) => {
                            warn!(%node, error = %e, "remote job dispatch failed");
                            let outcome = if is_unreachable(&e) {
                                unreachable.lock().unwrap().insert(node.clone());
                                Outcome::Unreachable
                            } else {
                                Outcome::Failed
                            };
                            out.extend(inputs.iter().map(|lfn| JobEntry::failed(lfn.clone(), outcome, e.to_string())));
                        }
                    }
                });
            }
            for _ in 0..FETCH_PARALLELISM.min(shipped.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(lfn) = shipped.get(i) else { break };
                    let entry = self.fetch_and_run(&invocation, lfn, &replicas[lfn], &unreachable);
                    entries.lock().unwrap().push(entry);
                });
            }
        });

        let mut entries = entries.into_inner().unwrap();
        entries.sort_by(|a, b| a.lfn.cmp(&b.lfn));
        Ok(JobResult {
            job_id: spec.job_id,
            algorithm: spec.algorithm,
            entries,
            placement: Some(decision),
            unreachable: unreachable.into_inner().unwrap().into_iter().collect(),
        })
    }

    /// Fetches `lfn` from the requester if it holds a replica, otherwise
    /// from the first replica that answers, verifies the checksum and runs
    /// the algorithm here. Fetched bytes are not retained.
    fn fetch_and_run(
        &self,
        invocation: &Invocation,
        lfn: &LogicalFileName,
        replicas: &[ReplicaEntry],
        unreachable: &Mutex<BTreeSet<String>>,
    ) -> JobEntry {
        let mut sources: Vec<&ReplicaEntry> = replicas.iter().collect();
        sources.sort_by_key(|r| (r.node_id != self.requester, r.node_id.clone()));
        let mut last_error = String::from("no replica");
        for replica in sources {
            let Some(member) = self.members.get(&replica.node_id) else {
                last_error = format!("{} is not a federation member", replica.node_id);
                continue;
            };
            match member.fetch_image(lfn) {
                Ok(image) => {
                    let actual = Checksum::of(&image.data);
                    if actual != replica.checksum {
                        return JobEntry::failed(
                            lfn.clone(),
                            Outcome::IntegrityError,
                            format!(
                                "bytes from {} hash to {}, catalogue says {}",
                                replica.node_id,
                                actual.to_hex(),
                                replica.checksum.to_hex()
                            ),
                        );
                    }
                    return invocation.run_entry(lfn, &image.data, &self.requester);
                }
                Err(e) => {
                    if is_unreachable(&e) {
                        unreachable.lock().unwrap().insert(replica.node_id.clone());
                    }
                    last_error = e.to_string();
                }
            }
        }
        JobEntry::failed(lfn.clone(), Outcome::Unreachable, last_error)
    }
}

fn is_unreachable(e: &Error) -> bool {
    e.is_connectivity() || matches!(e, Error::Codec(_))
}
