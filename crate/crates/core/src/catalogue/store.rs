use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Bound;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::{validate_prefix, CatalogueApi, Checksum, ListPage, LogicalFileName, ReplicaEntry};
use crate::{Error, Result};

/// How hard an acknowledged mutation is pushed to storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Durability {
    /// `fsync` after every record; survives power loss.
    #[default]
    Sync,
    /// Handed to the OS before acknowledging; survives process restart.
    Flush,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LogOp {
    Register,
    Remove,
}

/// One line of the mutation log.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogRecord {
    op: LogOp,
    lfn: LogicalFileName,
    node_id: String,
    local_path: Option<String>,
    size: Option<u64>,
    checksum: Option<Checksum>,
    timestamp: DateTime<Utc>,
}

impl LogRecord {
    fn register(r: &ReplicaEntry) -> Self {
        LogRecord {
            op: LogOp::Register,
            lfn: r.lfn.clone(),
            node_id: r.node_id.clone(),
            local_path: Some(r.local_path.clone()),
            size: Some(r.size_bytes),
            checksum: Some(r.checksum),
            timestamp: r.registered_at,
        }
    }
}

struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
    durability: Durability,
}

impl LogWriter {
    fn append(&mut self, rec: &LogRecord) -> Result<()> {
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        self.out.write_all(&line)?;
        self.out.flush()?;
        if self.durability == Durability::Sync {
            self.out.get_ref().sync_data()?;
        }
        Ok(())
    }
}

type State = BTreeMap<LogicalFileName, BTreeMap<String, ReplicaEntry>>;

/// Catalogue state with an append-only mutation log. Mutations are
/// serialized through one writer; reads proceed concurrently.
pub struct Catalogue {
    state: RwLock<State>,
    writer: Mutex<Option<LogWriter>>,
}

impl Catalogue {
    /// A catalogue with no backing log.
    pub fn in_memory() -> Self {
        Catalogue {
            state: RwLock::default(),
            writer: Mutex::new(None),
        }
    }

    /// Opens (or creates) the log at `path`, replays it and compacts it.
    pub fn open(path: impl AsRef<Path>, durability: Durability) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let state = if path.exists() {
            replay(&path)?
        } else {
            State::new()
        };
        compact(&path, &state)?;
        let file = OpenOptions::new().append(true).create(true).open(&path)?;
        info!(path = %path.display(), lfns = state.len(), "catalogue opened");
        Ok(Catalogue {
            state: RwLock::new(state),
            writer: Mutex::new(Some(LogWriter {
                path,
                out: BufWriter::new(file),
                durability,
            })),
        })
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.writer.lock().unwrap().as_ref().map(|w| w.path.clone())
    }

    /// Number of distinct logical file names.
    pub fn len(&self) -> usize {
        self.state.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every replica of every lfn, in lfn then node order.
    pub fn snapshot(&self) -> Vec<ReplicaEntry> {
        self.state
            .read()
            .unwrap()
            .values()
            .flat_map(|m| m.values().cloned())
            .collect()
    }
}

impl CatalogueApi for Catalogue {
    fn register(&self, replica: ReplicaEntry) -> Result<Vec<ReplicaEntry>> {
        let mut writer = self.writer.lock().unwrap();
        {
            let state = self.state.read().unwrap();
            if let Some(existing) = state.get(&replica.lfn) {
                if existing.contains_key(&replica.node_id) {
                    return Err(Error::conflict(format!(
                        "{} already has a replica at {}",
                        replica.lfn, replica.node_id
                    )));
                }
                if let Some(other) = existing.values().next() {
                    if other.checksum != replica.checksum || other.size_bytes != replica.size_bytes
                    {
                        return Err(Error::conflict(format!(
                            "{} is registered with checksum {} ({} bytes)",
                            replica.lfn, other.checksum, other.size_bytes
                        )));
                    }
                }
            }
        }
        if let Some(w) = writer.as_mut() {
            w.append(&LogRecord::register(&replica))?;
        }
        let mut state = self.state.write().unwrap();
        let entry = state.entry(replica.lfn.clone()).or_default();
        entry.insert(replica.node_id.clone(), replica);
        Ok(entry.values().cloned().collect())
    }

    fn remove_replica(&self, lfn: &LogicalFileName, node_id: &str) -> Result<usize> {
        let mut writer = self.writer.lock().unwrap();
        let present = self
            .state
            .read()
            .unwrap()
            .get(lfn)
            .is_some_and(|m| m.contains_key(node_id));
        if !present {
            return Err(Error::not_found(format!("no replica of {lfn} at {node_id}")));
        }
        if let Some(w) = writer.as_mut() {
            w.append(&LogRecord {
                op: LogOp::Remove,
                lfn: lfn.clone(),
                node_id: node_id.to_owned(),
                local_path: None,
                size: None,
                checksum: None,
                timestamp: Utc::now(),
            })?;
        }
        let mut state = self.state.write().unwrap();
        Ok(apply_remove(&mut state, lfn, node_id))
    }

    fn resolve(&self, lfn: &LogicalFileName) -> Result<Vec<ReplicaEntry>> {
        self.state
            .read()
            .unwrap()
            .get(lfn)
            .map(|m| m.values().cloned().collect())
            .ok_or_else(|| Error::not_found(format!("no replica of {lfn}")))
    }

    fn list(&self, prefix: &str, limit: usize, after: Option<&str>) -> Result<ListPage> {
        validate_prefix(prefix)?;
        if limit == 0 {
            return Err(Error::malformed("list limit must be positive"));
        }
        let state = self.state.read().unwrap();
        let start = match after {
            Some(a) if a >= prefix => Bound::Excluded(a),
            _ => Bound::Included(prefix),
        };
        let mut names = Vec::with_capacity(limit.min(1024));
        let mut more = false;
        for name in state
            .range::<str, _>((start, Bound::Unbounded))
            .map(|(k, _)| k)
            .take_while(|k| k.as_str().starts_with(prefix))
        {
            if names.len() == limit {
                more = true;
                break;
            }
            names.push(name.clone());
        }
        let next = if more {
            names.last().map(|n| n.as_str().to_owned())
        } else {
            None
        };
        Ok(ListPage { names, next })
    }
}

fn apply_remove(state: &mut State, lfn: &LogicalFileName, node_id: &str) -> usize {
    let Some(m) = state.get_mut(lfn) else {
        return 0;
    };
    m.remove(node_id);
    let left = m.len();
    if left == 0 {
        state.remove(lfn);
    }
    left
}

fn replay(path: &Path) -> Result<State> {
    let reader = BufReader::new(File::open(path)?);
    let mut state = State::new();
    let mut lines = reader.split(b'\n').peekable();
    let mut lineno = 0;
    while let Some(line) = lines.next() {
        let line = line?;
        lineno += 1;
        if line.is_empty() {
            continue;
        }
        let rec: LogRecord = match serde_json::from_slice(&line) {
            Ok(rec) => rec,
            Err(e) if lines.peek().is_none() => {
                warn!(line = lineno, error = %e, "discarding torn tail record");
                break;
            }
            Err(e) => {
                return Err(Error::malformed(format!(
                    "{}:{lineno}: {e}",
                    path.display()
                )))
            }
        };
        match rec.op {
            LogOp::Register => {
                let (Some(local_path), Some(size), Some(checksum)) =
                    (rec.local_path, rec.size, rec.checksum)
                else {
                    return Err(Error::malformed(format!(
                        "{}:{lineno}: register record missing fields",
                        path.display()
                    )));
                };
                state.entry(rec.lfn.clone()).or_default().insert(
                    rec.node_id.clone(),
                    ReplicaEntry {
                        lfn: rec.lfn,
                        node_id: rec.node_id,
                        local_path,
                        size_bytes: size,
                        checksum,
                        registered_at: rec.timestamp,
                    },
                );
            }
            LogOp::Remove => {
                apply_remove(&mut state, &rec.lfn, &rec.node_id);
            }
        }
    }
    Ok(state)
}

/// Rewrites the log as one register record per live replica.
fn compact(path: &Path, state: &State) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("compact");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        for replica in state.values().flat_map(|m| m.values()) {
            serde_json::to_writer(&mut out, &LogRecord::register(replica))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        out.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
