use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use tracing::warn;

use super::{format_record_id, parse_record_id, MetadataRecord};
use crate::{Error, Result};

/// Per-node record table: one JSON record per line on disk, indexed in
/// memory by id and by kind.
pub struct RecordStore {
    path: Option<PathBuf>,
    node_id: String,
    records: BTreeMap<String, MetadataRecord>,
    by_kind: BTreeMap<String, BTreeSet<String>>,
    next_counter: u64,
}

impl RecordStore {
    pub fn in_memory(node_id: impl Into<String>) -> Self {
        RecordStore {
            path: None,
            node_id: node_id.into(),
            records: BTreeMap::new(),
            by_kind: BTreeMap::new(),
            next_counter: 1,
        }
    }

    pub fn open(path: impl AsRef<Path>, node_id: impl Into<String>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut store = RecordStore::in_memory(node_id);
        if path.exists() {
            let mut lines = BufReader::new(File::open(&path)?).split(b'\n').peekable();
            let mut lineno = 0;
            while let Some(line) = lines.next() {
                let line = line?;
                lineno += 1;
                if line.is_empty() {
                    continue;
                }
                match serde_json::from_slice::<MetadataRecord>(&line) {
                    Ok(rec) => store.index(rec),
                    Err(e) if lines.peek().is_none() => {
                        warn!(path = %path.display(), error = %e, "discarding torn tail record");
                    }
                    Err(e) => {
                        return Err(Error::malformed(format!(
                            "{}:{lineno}: {e}",
                            path.display()
                        )))
                    }
                }
            }
        }
        store.path = Some(path);
        Ok(store)
    }

    fn index(&mut self, rec: MetadataRecord) {
        if let Some((origin, counter)) = parse_record_id(&rec.record_id) {
            if origin == self.node_id {
                self.next_counter = self.next_counter.max(counter + 1);
            }
        }
        self.by_kind
            .entry(rec.kind.clone())
            .or_default()
            .insert(rec.record_id.clone());
        self.records.insert(rec.record_id.clone(), rec);
    }

    /// Reserves `n` fresh record ids for this node.
    pub fn allocate_ids(&mut self, n: usize) -> Vec<String> {
        (0..n)
            .map(|_| {
                let id = format_record_id(&self.node_id, self.next_counter);
                self.next_counter += 1;
                id
            })
            .collect()
    }

    /// Appends a batch durably in one write, then indexes it.
    pub fn append(&mut self, batch: Vec<MetadataRecord>) -> Result<()> {
        for rec in &batch {
            if self.records.contains_key(&rec.record_id) {
                return Err(Error::conflict(format!(
                    "record {} already exists",
                    rec.record_id
                )));
            }
        }
        if let Some(path) = &self.path {
            let mut buf = Vec::new();
            for rec in &batch {
                serde_json::to_writer(&mut buf, rec)?;
                buf.push(b'\n');
            }
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            file.write_all(&buf)?;
            file.sync_data()?;
        }
        for rec in batch {
            self.index(rec);
        }
        Ok(())
    }

    /// Adds records without persisting them (used to assemble merged views).
    pub fn insert_transient(&mut self, rec: MetadataRecord) {
        self.index(rec);
    }

    pub fn get(&self, id: &str) -> Option<&MetadataRecord> {
        self.records.get(id)
    }

    pub fn of_kind<'a>(&'a self, kind: &str) -> impl Iterator<Item = &'a MetadataRecord> + 'a {
        self.by_kind
            .get(kind)
            .into_iter()
            .flat_map(|ids| ids.iter())
            .filter_map(|id| self.records.get(id))
    }

    pub fn all(&self) -> impl Iterator<Item = &MetadataRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
