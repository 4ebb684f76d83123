//! Expected contents of the checked-in frame vectors in `tests/golden`.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::{Path, PathBuf};

use chrono::{TimeZone, Utc};
use gridbox_core::catalogue::{CatMutation, Checksum, ListRequest, LogicalFileName, ReplicaEntry, ResolveRequest};
use gridbox_core::mediator::{CmpOp, Literal, Placement, PlacementChoice, PlacementDecision, Predicate, ResultSet, Row, SubQuery};
use gridbox_core::node::{
    FetchRequest, ImageData, IngestReport, IngestRequest, JobEntry, JobResult, JobScope, JobSpec, JobState, JobStatus,
    JobStatusRequest, JobSubmit, Outcome, QueryRequest,
};
use gridbox_core::proto::{decode_frame, read_frame, AuthOk, AuthToken, ErrorCode, ErrorReply, Frame, Kind, Role};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

const LFN: &str = "/node-a/P-0123456789abcdef/ST00001/img-L-CC.smi";
const LFN2: &str = "/node-b/P-fedcba9876543210/ST00002/img-R-MLO.smi";
const JOB: &str = "node-a-20240301093000123-0001";
// SHA-256 of "abc" and of "node-a-secret".
const SUM_ABC: &str = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
const SECRET_DIGEST: &str = "bb41b48037fa9fd32f84c871f00a22702d7c221e9381c0bea6930d77a95c549e";

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn lfn(s: &str) -> LogicalFileName {
    LogicalFileName::new(s).unwrap()
}

/// Decodes `bytes`, compares the message with `expected` and re-encodes
/// both the decoded frame and `expected` bit for bit.
fn check<T>(bytes: &[u8], kind: Kind, expected: &T) -> Result<(), String>
where
    T: Serialize + DeserializeOwned + PartialEq + Debug,
{
    let (frame, used) = decode_frame(bytes).map_err(|e| format!("decode: {e}"))?;
    if used != bytes.len() {
        return Err(format!("decoded {used} of {} bytes", bytes.len()));
    }
    if frame.kind() != kind {
        return Err(format!("kind {:?}, expected {kind:?}", frame.kind()));
    }
    let msg: T = frame.parse().map_err(|e| format!("parse: {e}"))?;
    if &msg != expected {
        return Err(format!("decoded {msg:?}\nexpected {expected:?}"));
    }
    if frame.encode() != bytes {
        return Err("decoded frame re-encodes differently".into());
    }
    let fresh = Frame::from_message(kind, expected).map_err(|e| e.to_string())?.encode();
    if fresh != bytes {
        return Err(format!(
            "expected message encodes as\n{}\nfile holds\n{}",
            String::from_utf8_lossy(&fresh[5..]),
            String::from_utf8_lossy(&bytes[5..])
        ));
    }
    Ok(())
}

type Checker = Box<dyn Fn(&[u8]) -> Result<(), String>>;

fn entry<T>(kind: Kind, expected: T) -> Checker
where
    T: Serialize + DeserializeOwned + PartialEq + Debug + 'static,
{
    Box::new(move |bytes| check(bytes, kind, &expected))
}

/// Every golden file name with the check for its content.
pub fn expectations() -> Vec<(&'static str, Checker)> {
    let ts = Utc.with_ymd_and_hms(2024, 3, 1, 9, 30, 0).unwrap();
    let sum_abc: Checksum = SUM_ABC.parse().unwrap();
    let image_bytes = b"SMI1\x00\x80\x00\x80".to_vec();
    let predicate = Predicate::And(
        Box::new(Predicate::cmp("laterality", CmpOp::Eq, Literal::Text("L".into()))),
        Box::new(Predicate::Not(Box::new(Predicate::Or(
            Box::new(Predicate::cmp("view", CmpOp::Eq, Literal::Text("MLO".into()))),
            Box::new(Predicate::cmp("dense_fraction", CmpOp::Ge, Literal::Real(0.5))),
        )))),
    );
    vec![
        (
            "01-auth",
            entry(
                Kind::Auth,
                AuthToken { node_id: "node-a".into(), secret_digest: SECRET_DIGEST.into(), issued_at: ts },
            ),
        ),
        ("02-auth-ok", entry(Kind::AuthOk, AuthOk { node_id: "node-a".into(), role: Role::Node })),
        (
            "03-error",
            entry(Kind::Error, ErrorReply { code: ErrorCode::NotFound, detail: format!("no replica of {LFN}") }),
        ),
        (
            "10-cat-register",
            entry(
                Kind::CatRegister,
                CatMutation::Register {
                    replica: ReplicaEntry {
                        lfn: lfn(LFN),
                        node_id: "node-a".into(),
                        local_path: "blobs/ba/ba7816bf.smi".into(),
                        size_bytes: 32784,
                        checksum: sum_abc,
                        registered_at: ts,
                    },
                },
            ),
        ),
        ("10-cat-remove", entry(Kind::CatRegister, CatMutation::Remove { lfn: lfn(LFN), node_id: "node-b".into() })),
        ("11-cat-resolve", entry(Kind::CatResolve, ResolveRequest { lfn: lfn(LFN) })),
        (
            "12-cat-list",
            entry(
                Kind::CatList,
                ListRequest { prefix: "/node-a/".into(), limit: 100, after: Some(LFN.into()) },
            ),
        ),
        (
            "20-sub-query-local",
            entry(
                Kind::SubQuery,
                QueryRequest::Local(SubQuery {
                    target_node: "node-a".into(),
                    kind: "image".into(),
                    predicate: Some(predicate),
                    projection: Some(vec!["view".into(), "laterality".into()]),
                }),
            ),
        ),
        (
            "20-sub-query-federated",
            entry(
                Kind::SubQuery,
                QueryRequest::Federated { query: "FIND study WHERE modality = MG AT node-a, node-b".into() },
            ),
        ),
        (
            "21-result-set",
            entry(
                Kind::ResultSet,
                ResultSet {
                    kind: "image".into(),
                    projection: Some(vec!["view".into(), "laterality".into()]),
                    rows: vec![Row {
                        record_id: "node-a/img-000001".into(),
                        origin_node: "node-a".into(),
                        values: BTreeMap::from([("laterality".into(), json!("L")), ("view".into(), json!("CC"))]),
                        identity: Some(SUM_ABC.into()),
                    }],
                    answered: vec!["node-a".into(), "node-b".into()],
                    unreachable: vec!["node-c".into()],
                },
            ),
        ),
        (
            "30-job-submit",
            entry(
                Kind::JobSubmit,
                JobSubmit {
                    spec: JobSpec {
                        job_id: String::new(),
                        algorithm: "detect_microcalcs".into(),
                        inputs: vec![lfn(LFN), lfn(LFN2)],
                        requester: String::new(),
                        params: BTreeMap::from([("min_snr".into(), json!(4.0)), ("window".into(), json!(9))]),
                    },
                    scope: JobScope::Federated,
                    threshold_bytes: Some(10 * 1024 * 1024),
                },
            ),
        ),
        ("31-job-status-request", entry(Kind::JobStatus, JobStatusRequest { job_id: JOB.into(), wait_ms: 10_000 })),
        ("31-job-status", entry(Kind::JobStatus, JobStatus { job_id: JOB.into(), state: JobState::Running })),
        (
            "32-job-result",
            entry(
                Kind::JobResult,
                JobResult {
                    job_id: JOB.into(),
                    algorithm: "qc_metrics".into(),
                    entries: vec![
                        JobEntry {
                            lfn: lfn(LFN),
                            outcome: Outcome::Ok,
                            output: Some(json!({"snr": 12.5})),
                            detail: None,
                            executed_at: Some("node-a".into()),
                        },
                        JobEntry {
                            lfn: lfn(LFN2),
                            outcome: Outcome::IntegrityError,
                            output: None,
                            detail: Some("checksum mismatch".into()),
                            executed_at: None,
                        },
                    ],
                    placement: Some(PlacementDecision {
                        threshold_bytes: 10 * 1024 * 1024,
                        choices: vec![
                            PlacementChoice {
                                lfn: lfn(LFN),
                                size_bytes: 32784,
                                placement: Placement::ExecuteAtData { node: "node-a".into() },
                            },
                            PlacementChoice {
                                lfn: lfn(LFN2),
                                size_bytes: 32784,
                                placement: Placement::ReplicateToRequester,
                            },
                        ],
                        rationale: "inputs above 10485760 bytes run where they are stored".into(),
                    }),
                    unreachable: vec![],
                },
            ),
        ),
        ("40-fetch-image", entry(Kind::FetchImage, FetchRequest { lfn: lfn(LFN) })),
        (
            "41-image-data",
            entry(
                Kind::ImageData,
                ImageData {
                    lfn: lfn(LFN),
                    checksum: Checksum::of(&image_bytes),
                    size_bytes: image_bytes.len() as u64,
                    data: image_bytes,
                },
            ),
        ),
        ("50-ingest", entry(Kind::Ingest, IngestRequest { path: "/srv/incoming/study-0001.mgc".into() })),
        (
            "51-ingest-report",
            entry(
                Kind::IngestReport,
                IngestReport {
                    study_uid: "1.2.826.0.1.3680043.2.1125.1".into(),
                    pseudonym: serde_json::from_value(json!("P-0123456789abcdef")).unwrap(),
                    records: vec![
                        "node-a/pat-000001".into(),
                        "node-a/st-000001".into(),
                        "node-a/img-000001".into(),
                        "node-a/img-000002".into(),
                    ],
                    lfns: vec![lfn(LFN)],
                },
            ),
        ),
    ]
}

/// Runs every expectation against its file, then reads all files back to
/// back as one stream. Returns one line per failure.
pub fn check_all() -> Vec<String> {
    let dir = golden_dir();
    let mut failures = Vec::new();
    let mut stream = Vec::new();
    let expectations = expectations();
    for (name, check) in &expectations {
        let path = dir.join(format!("{name}.frame"));
        match std::fs::read(&path) {
            Ok(bytes) => {
                if let Err(e) = check(&bytes) {
                    failures.push(format!("{name}: {e}"));
                }
                stream.extend_from_slice(&bytes);
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let on_disk = std::fs::read_dir(&dir).map(|d| d.count()).unwrap_or(0);
    if on_disk != expectations.len() {
        failures.push(format!("{on_disk} files in {}, {} expected", dir.display(), expectations.len()));
    }
    let mut reader = stream.as_slice();
    let mut frames = 0;
    loop {
        match read_frame(&mut reader) {
            Ok(Some(_)) => frames += 1,
            Ok(None) => break,
            Err(e) => {
                failures.push(format!("stream read after {frames} frames: {e}"));
                break;
            }
        }
    }
    if failures.is_empty() && frames != expectations.len() {
        failures.push(format!("stream yielded {frames} frames"));
    }
    failures
}
