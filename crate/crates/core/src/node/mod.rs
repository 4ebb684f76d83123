//! The grid-box: a site's single point of entry. Ingests studies through
//! the de-identification pipeline, keeps images in a content-addressed
//! store and metadata in a local record table, answers sub-queries, serves
//! image fetches and runs analysis jobs.

pub mod blob;
mod client;
pub mod config;
pub mod container;
pub mod jobs;
mod service;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{info, warn};

use crate::anonymizer::{strip_identifiers, Pseudonym, ReidMap, SanitizedHeader, SiteKey};
use crate::catalogue::{is_component, CatalogueApi, Checksum, LogicalFileName, ReplicaEntry};
use crate::imaging::qc_metrics;
use crate::mediator::{evaluate_local, ResultSet, SubQuery};
use crate::metamodel::{MetadataRecord, RecordStore, Region, SchemaDescription, SchemaRegistry};
use crate::{Error, Result};

use blob::{encode_blob, BlobHeader, BlobStore};
use container::Container;

pub use client::NodeClient;
pub use config::{CatalogueConfig, DurabilitySetting, NodeConfig};
pub use jobs::{Algorithm, Invocation, JobEntry, JobResult, JobSpec, Outcome};
pub use service::{
    IngestRequest, JobScope, JobState, JobStatus, JobStatusRequest, JobSubmit, NodeService, QueryRequest,
};

/// What a node offers to the mediator, in-process or over the wire.
pub trait NodeApi: Send + Sync {
    fn node_id(&self) -> &str;
    fn local_query(&self, sub: &SubQuery) -> Result<ResultSet>;
    fn run_job(&self, spec: &JobSpec) -> Result<JobResult>;
    fn fetch_image(&self, lfn: &LogicalFileName) -> Result<ImageData>;
}

/// Body of `IMAGE_DATA`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageData {
    pub lfn: LogicalFileName,
    pub checksum: Checksum,
    pub size_bytes: u64,
    #[serde(with = "base64_bytes")]
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchRequest {
    pub lfn: LogicalFileName,
}

mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

/// Outcome of one successful ingest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub study_uid: String,
    pub pseudonym: Pseudonym,
    /// Record ids created, patient first when a new patient was recorded.
    pub records: Vec<String>,
    pub lfns: Vec<LogicalFileName>,
}

pub struct NodeOptions {
    pub node_id: String,
    pub data_dir: PathBuf,
    pub site_key: SiteKey,
    pub workers: usize,
}

/// Counting semaphore bounding concurrent image computations.
struct Slots {
    free: Mutex<usize>,
    freed: Condvar,
}

impl Slots {
    fn new(n: usize) -> Slots {
        Slots {
            free: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.freed.wait(free).unwrap();
        }
        *free -= 1;
        drop(free);
        let out = f();
        *self.free.lock().unwrap() += 1;
        self.freed.notify_one();
        out
    }
}

pub struct Node {
    id: String,
    data_dir: PathBuf,
    registry: RwLock<SchemaRegistry>,
    records: RwLock<RecordStore>,
    blobs: BlobStore,
    catalogue: Arc<dyn CatalogueApi>,
    site_key: SiteKey,
    reid: Mutex<ReidMap>,
    lfn_index: RwLock<BTreeMap<LogicalFileName, Checksum>>,
    /// Serializes the persistence half of ingest.
    commit: Mutex<()>,
    workers: usize,
    slots: Slots,
}

/// Where a node keeps its state under `data_dir`.
pub mod layout {
    pub const BLOBS: &str = "blobs";
    pub const RECORDS: &str = "records.jsonl";
    pub const REID_MAP: &str = "reid/map.enc";
    pub const SCHEMAS: &str = "schemas";
}

impl Node {
    pub fn open(opts: NodeOptions, catalogue: Arc<dyn CatalogueApi>) -> Result<Node> {
        if !is_component(&opts.node_id) {
            return Err(Error::malformed(format!("`{}` is not a valid node id", opts.node_id)));
        }
        fs::create_dir_all(&opts.data_dir)?;
        let registry = load_registry(&opts.data_dir.join(layout::SCHEMAS))?;
        let records = RecordStore::open(opts.data_dir.join(layout::RECORDS), opts.node_id.clone())?;
        let blobs = BlobStore::open(opts.data_dir.join(layout::BLOBS))?;
        let reid = ReidMap::open(opts.data_dir.join(layout::REID_MAP), &opts.site_key)?;
        let mut lfn_index = BTreeMap::new();
        for rec in records.of_kind("image").filter(|r| r.origin_node == opts.node_id) {
            if let (Some(lfn), Some(sum)) = (
                rec.values.get("lfn").and_then(Value::as_str),
                rec.values.get("checksum").and_then(Value::as_str),
            ) {
                lfn_index.insert(LogicalFileName::new(lfn)?, sum.parse()?);
            }
        }
        info!(node = %opts.node_id, records = records.len(), images = lfn_index.len(), "node opened");
        let workers = opts.workers.max(1);
        Ok(Node {
            id: opts.node_id,
            data_dir: opts.data_dir,
            registry: RwLock::new(registry),
            records: RwLock::new(records),
            blobs,
            catalogue,
            site_key: opts.site_key,
            reid: Mutex::new(reid),
            lfn_index: RwLock::new(lfn_index),
            commit: Mutex::new(()),
            workers,
            slots: Slots::new(workers),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn catalogue(&self) -> &Arc<dyn CatalogueApi> {
        &self.catalogue
    }

    pub fn registry(&self) -> SchemaRegistry {
        self.registry.read().unwrap().clone()
    }

    /// Registers a schema document and keeps it under the data directory so
    /// it survives restarts.
    pub fn load_schema(&self, doc: &str) -> Result<SchemaDescription> {
        let mut registry = self.registry.write().unwrap();
        let schema = registry.load_schema(doc)?;
        let dir = self.data_dir.join(layout::SCHEMAS);
        fs::create_dir_all(&dir)?;
        fs::write(
            dir.join(format!("{}-v{}.json", schema.name, schema.version)),
            schema.to_document(),
        )?;
        Ok(schema)
    }

    /// Copies of every record held here.
    pub fn export_records(&self) -> Vec<MetadataRecord> {
        self.records.read().unwrap().all().cloned().collect()
    }

    /// Logical names of the images stored here, with their checksums.
    pub fn local_images(&self) -> BTreeMap<LogicalFileName, Checksum> {
        self.lfn_index.read().unwrap().clone()
    }

    pub fn blob_store(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn reid_map_path(&self) -> PathBuf {
        self.data_dir.join(layout::REID_MAP)
    }

    /// Looks up the identifiers behind a pseudonym. Local use only.
    pub fn reidentify(&self, pseudonym: &Pseudonym) -> Option<crate::anonymizer::Identifiers> {
        self.reid.lock().unwrap().lookup(pseudonym).cloned()
    }

    pub fn ingest_file(&self, path: &Path) -> Result<IngestReport> {
        self.ingest_study(Container::read(path)?)
    }

    /// Runs the ingest pipeline for one study, all or nothing:
    /// de-identify, QC, store blobs, register lfns, write records.
    pub fn ingest_study(&self, container: Container) -> Result<IngestReport> {
        let Container { header, images } = container;
        let (clean, ids) = strip_identifiers(header, &self.site_key)?;
        validate_study(&clean)?;

        let mut prepared = Vec::with_capacity(images.len());
        for (h, img) in clean.images.iter().zip(&images) {
            if h.width != img.width() || h.height != img.height() {
                return Err(Error::malformed("image header disagrees with payload"));
            }
            let blob = encode_blob(
                &BlobHeader {
                    width: h.width,
                    height: h.height,
                    spacing_mm: h.spacing_mm,
                    view: h.view.clone(),
                    laterality: h.laterality.clone(),
                    acquisition: h.acquisition(),
                },
                img,
            )?;
            let lfn = LogicalFileName::new(format!(
                "/{}/{}/{}/img-{}-{}.smi",
                self.id, clean.pseudonym, clean.study_id, h.laterality, h.view
            ))?;
            prepared.push((lfn, Checksum::of(&blob), blob, qc_metrics(img)));
        }

        let _commit = self.commit.lock().unwrap();
        let (batch, report) = {
            let mut records = self.records.write().unwrap();
            let duplicate = records.of_kind("study").any(|r| {
                r.origin_node == self.id && r.values.get("study_uid") == Some(&Value::from(clean.study_id.as_str()))
            });
            if duplicate {
                return Err(Error::conflict(format!("study {} already ingested", clean.study_id)));
            }
            let existing_patient = records
                .of_kind("patient")
                .find(|r| {
                    r.origin_node == self.id
                        && r.values.get("pseudonym") == Some(&Value::from(clean.pseudonym.as_str()))
                })
                .map(|r| r.record_id.clone());
            let fresh = usize::from(existing_patient.is_none()) + 1 + prepared.len() + clean.annotations.len();
            let mut ids = records.allocate_ids(fresh).into_iter();
            drop(records);
            self.build_records(&clean, &prepared, existing_patient, &mut ids)?
        };
        {
            let registry = self.registry.read().unwrap();
            for rec in &batch {
                registry.validate_record(rec.clone())?;
            }
        }

        let mut fresh_blobs = Vec::new();
        let mut registered = Vec::new();
        let outcome = (|| -> Result<()> {
            for (lfn, sum, blob, _) in &prepared {
                let (stored, fresh) = self.blobs.put(blob)?;
                debug_assert_eq!(&stored, sum);
                if fresh {
                    fresh_blobs.push(stored);
                }
                self.catalogue.register(ReplicaEntry {
                    lfn: lfn.clone(),
                    node_id: self.id.clone(),
                    local_path: format!("{}/{}", layout::BLOBS, BlobStore::key(sum)),
                    size_bytes: blob.len() as u64,
                    checksum: *sum,
                    registered_at: Utc::now(),
                })?;
                registered.push(lfn.clone());
            }
            self.reid.lock().unwrap().upsert(&clean.pseudonym, &ids)?;
            self.records.write().unwrap().append(batch)?;
            Ok(())
        })();
        if let Err(e) = outcome {
            warn!(node = %self.id, study = %clean.study_id, error = %e, "ingest failed, rolling back");
            for lfn in &registered {
                if let Err(undo) = self.catalogue.remove_replica(lfn, &self.id) {
                    warn!(%lfn, error = %undo, "compensating catalogue removal failed");
                }
            }
            for sum in &fresh_blobs {
                let _ = self.blobs.remove(sum);
            }
            return Err(e);
        }
        let mut index = self.lfn_index.write().unwrap();
        for (lfn, sum, _, _) in &prepared {
            index.insert(lfn.clone(), *sum);
        }
        info!(node = %self.id, study = %clean.study_id, images = prepared.len(), "study ingested");
        Ok(report)
    }

    fn build_records(
        &self,
        clean: &SanitizedHeader,
        prepared: &[(LogicalFileName, Checksum, Vec<u8>, crate::imaging::QcReport)],
        existing_patient: Option<String>,
        ids: &mut impl Iterator<Item = String>,
    ) -> Result<(Vec<MetadataRecord>, IngestReport)> {
        let registry = self.registry.read().unwrap();
        let version = |kind: &str| -> Result<u32> {
            registry
                .latest(kind)
                .map(|s| s.version)
                .ok_or_else(|| Error::internal(format!("no schema for `{kind}`")))
        };
        let mut batch = Vec::new();
        let mut record = |kind: &str, values: Value, batch: &mut Vec<MetadataRecord>| -> Result<String> {
            let id = ids.next().expect("enough ids allocated");
            batch.push(MetadataRecord {
                record_id: id.clone(),
                kind: kind.to_owned(),
                schema_version: version(kind)?,
                values: serde_json::from_value(values)?,
                origin_node: self.id.clone(),
            });
            Ok(id)
        };
        let patient_ref = match existing_patient {
            Some(id) => id,
            None => record(
                "patient",
                json!({ "pseudonym": clean.pseudonym, "birth_year": clean.birth_year, "site": self.id }),
                &mut batch,
            )?,
        };
        let sides: BTreeSet<&str> = clean.images.iter().map(|h| h.laterality.as_str()).collect();
        let laterality = if sides.len() > 1 { "B" } else { sides.iter().next().copied().unwrap_or("B") };
        let study_ref = record(
            "study",
            json!({
                "patient_ref": patient_ref,
                "study_uid": clean.study_id,
                "study_date": clean.study_date,
                "laterality": laterality,
                "site": self.id,
            }),
            &mut batch,
        )?;
        let mut image_ids = Vec::new();
        for (h, (lfn, sum, _, qc)) in clean.images.iter().zip(prepared) {
            image_ids.push(record(
                "image",
                json!({
                    "study_ref": study_ref,
                    "view": h.view,
                    "laterality": h.laterality,
                    "lfn": lfn,
                    "checksum": sum.to_hex(),
                    "width": h.width,
                    "height": h.height,
                    "spacing_mm": h.spacing_mm,
                    "tube_kvp": h.tube_kvp,
                    "exposure_mas": h.exposure_mas,
                    "detector_gain": h.detector_gain,
                    "detector_offset": h.detector_offset,
                    "qc_mean": qc.mean_brightness,
                    "qc_contrast": qc.contrast,
                }),
                &mut batch,
            )?);
        }
        for a in &clean.annotations {
            record(
                "annotation",
                json!({
                    "image_ref": image_ids[a.image_index],
                    "annotator_role": a.annotator_role,
                    "finding": a.finding,
                    "region_shape": a.region_shape,
                    "region_coords": a.region_coords,
                }),
                &mut batch,
            )?;
        }
        let report = IngestReport {
            study_uid: clean.study_id.clone(),
            pseudonym: clean.pseudonym.clone(),
            records: batch.iter().map(|r| r.record_id.clone()).collect(),
            lfns: prepared.iter().map(|p| p.0.clone()).collect(),
        };
        Ok((batch, report))
    }

    /// Drops catalogue replicas that claim to live here but have no local
    /// record, left behind if the process died mid-ingest.
    pub fn reconcile(&self) -> Result<usize> {
        let local = self.local_images();
        let prefix = format!("/{}/", self.id);
        let mut after: Option<String> = None;
        let mut orphans = Vec::new();
        loop {
            let page = self.catalogue.list(&prefix, 1000, after.as_deref())?;
            for lfn in &page.names {
                if !local.contains_key(lfn)
                    && self.catalogue.resolve(lfn)?.iter().any(|r| r.node_id == self.id)
                {
                    orphans.push(lfn.clone());
                }
            }
            match page.next {
                Some(next) => after = Some(next),
                None => break,
            }
        }
        for lfn in &orphans {
            warn!(node = %self.id, %lfn, "removing orphaned replica");
            self.catalogue.remove_replica(lfn, &self.id)?;
        }
        Ok(orphans.len())
    }
}

impl NodeApi for Node {
    fn node_id(&self) -> &str {
        &self.id
    }

    /// Evaluated against this node's records only; never touches the network.
    fn local_query(&self, sub: &SubQuery) -> Result<ResultSet> {
        let registry = self.registry.read().unwrap();
        let records = self.records.read().unwrap();
        evaluate_local(&registry, &records, sub, &self.id)
    }

    fn run_job(&self, spec: &JobSpec) -> Result<JobResult> {
        let invocation = Invocation::from_spec(spec)?;
        let inputs: BTreeSet<&LogicalFileName> = spec.inputs.iter().collect();
        let located: Vec<(LogicalFileName, Checksum)> = {
            let index = self.lfn_index.read().unwrap();
            inputs
                .into_iter()
                .map(|lfn| {
                    index
                        .get(lfn)
                        .map(|sum| (lfn.clone(), *sum))
                        .ok_or_else(|| Error::not_found(format!("{lfn} is not replicated at {}", self.id)))
                })
                .collect::<Result<_>>()?
        };
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<JobEntry>> = Mutex::new(Vec::with_capacity(located.len()));
        std::thread::scope(|scope| {
            for _ in 0..self.workers.min(located.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((lfn, sum)) = located.get(i) else { break };
                    let entry = self.slots.run(|| match self.blobs.get(sum) {
                        Ok(bytes) => invocation.run_entry(lfn, &bytes, &self.id),
                        Err(e @ Error::Integrity(_)) => {
                            JobEntry::failed(lfn.clone(), Outcome::IntegrityError, e.to_string())
                        }
                        Err(e) => JobEntry::failed(lfn.clone(), Outcome::Failed, e.to_string()),
                    });
                    results.lock().unwrap().push(entry);
                });
            }
        });
        let mut entries = results.into_inner().unwrap();
        entries.sort_by(|a, b| a.lfn.cmp(&b.lfn));
        Ok(JobResult {
            job_id: spec.job_id.clone(),
            algorithm: spec.algorithm.clone(),
            entries,
            placement: None,
            unreachable: Vec::new(),
        })
    }

    fn fetch_image(&self, lfn: &LogicalFileName) -> Result<ImageData> {
        let sum = self
            .lfn_index
            .read()
            .unwrap()
            .get(lfn)
            .copied()
            .ok_or_else(|| Error::not_found(format!("{lfn} is not replicated at {}", self.id)))?;
        let data = self.blobs.get(&sum)?;
        Ok(ImageData {
            lfn: lfn.clone(),
            checksum: sum,
            size_bytes: data.len() as u64,
            data,
        })
    }
}

fn load_registry(dir: &Path) -> Result<SchemaRegistry> {
    let mut registry = SchemaRegistry::with_baseline();
    if dir.is_dir() {
        let mut docs = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                docs.push(SchemaDescription::parse(&fs::read_to_string(&path)?)?);
            }
        }
        docs.sort_by(|a, b| (&a.name, a.version).cmp(&(&b.name, b.version)));
        for schema in docs {
            registry.register(schema)?;
        }
    }
    Ok(registry)
}

/// Structural checks that must pass before anything is persisted.
fn validate_study(clean: &SanitizedHeader) -> Result<()> {
    if !is_component(&clean.study_id) {
        return Err(Error::malformed(format!("study id `{}` is not a valid name component", clean.study_id)));
    }
    if clean.images.is_empty() {
        return Err(Error::malformed("study has no images"));
    }
    let mut seen = BTreeSet::new();
    for h in &clean.images {
        if !matches!(h.view.as_str(), "CC" | "MLO") || !matches!(h.laterality.as_str(), "L" | "R") {
            return Err(Error::malformed(format!("unsupported view {}-{}", h.laterality, h.view)));
        }
        if !seen.insert((h.laterality.as_str(), h.view.as_str())) {
            return Err(Error::malformed(format!("duplicate view {}-{}", h.laterality, h.view)));
        }
        h.acquisition().validate()?;
    }
    for a in &clean.annotations {
        if a.image_index >= clean.images.len() {
            return Err(Error::malformed(format!("annotation refers to image {}", a.image_index)));
        }
        Region::parse(&a.region_shape, &a.region_coords)?;
    }
    Ok(())
}
