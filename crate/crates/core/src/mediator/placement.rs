use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catalogue::{CatalogueApi, LogicalFileName, ReplicaEntry};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Placement {
    /// Run the algorithm at `node`, which holds a replica.
    ExecuteAtData { node: String },
    /// Ship the bytes to the requesting node and run there.
    ReplicateToRequester,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementChoice {
    pub lfn: LogicalFileName,
    pub size_bytes: u64,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementDecision {
    pub threshold_bytes: u64,
    pub choices: Vec<PlacementChoice>,
    pub rationale: String,
}

impl PlacementDecision {
    pub fn for_lfn(&self, lfn: &LogicalFileName) -> Option<&Placement> {
        self.choices.iter().find(|c| &c.lfn == lfn).map(|c| &c.placement)
    }
}

/// Resolves every input and applies the size-threshold rule: files larger
/// than `threshold` run at the replica node holding the most of the job's
/// inputs (ties to the smallest node id); the rest are replicated to the
/// requester.
pub fn place_job(
    inputs: &[LogicalFileName],
    catalogue: &dyn CatalogueApi,
    threshold: u64,
) -> Result<(PlacementDecision, BTreeMap<LogicalFileName, Vec<ReplicaEntry>>)> {
    let mut replicas = BTreeMap::new();
    for lfn in inputs {
        if !replicas.contains_key(lfn) {
            replicas.insert(lfn.clone(), catalogue.resolve(lfn)?);
        }
    }
    let decision = decide(&replicas, threshold);
    Ok((decision, replicas))
}

/// The placement rule over already-resolved replicas.
pub fn decide(replicas: &BTreeMap<LogicalFileName, Vec<ReplicaEntry>>, threshold: u64) -> PlacementDecision {
    let mut holdings: BTreeMap<&str, usize> = BTreeMap::new();
    for entries in replicas.values() {
        for r in entries {
            *holdings.entry(r.node_id.as_str()).or_default() += 1;
        }
    }
    let mut remote = 0usize;
    let mut shipped = 0u64;
    let choices = replicas
        .iter()
        .map(|(lfn, entries)| {
            let size_bytes = entries.first().map_or(0, |r| r.size_bytes);
            let placement = if size_bytes > threshold {
                remote += 1;
                // max_by_key keeps the last maximum; iterate descending so
                // that is the smallest node id.
                let node = entries
                    .iter()
                    .rev()
                    .max_by_key(|r| holdings[r.node_id.as_str()])
                    .map(|r| r.node_id.clone())
                    .expect("resolved lfns have at least one replica");
                Placement::ExecuteAtData { node }
            } else {
                shipped += size_bytes;
                Placement::ReplicateToRequester
            };
            PlacementChoice {
                lfn: lfn.clone(),
                size_bytes,
                placement,
            }
        })
        .collect();
    PlacementDecision {
        threshold_bytes: threshold,
        choices,
        rationale: format!(
            "{remote} input(s) above {threshold} bytes run at their data; {shipped} bytes replicated to the requester"
        ),
    }
}

/// Payload bytes that cross the network under `decision` when the job is
/// requested by `requester`.
pub fn bytes_moved(
    decision: &PlacementDecision,
    replicas: &BTreeMap<LogicalFileName, Vec<ReplicaEntry>>,
    requester: &str,
) -> u64 {
    decision
        .choices
        .iter()
        .filter(|c| c.placement == Placement::ReplicateToRequester)
        .filter(|c| !replicas[&c.lfn].iter().any(|r| r.node_id == requester))
        .map(|c| c.size_bytes)
        .sum()
}
