//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod golden;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use gridbox_core::catalogue::{Catalogue, CatalogueApi, Checksum, Durability, LogicalFileName, ReplicaEntry};
use gridbox_core::corpus::{self, Manifest};
use gridbox_core::mediator::{evaluate_local, parse_query, ResultSet, Row, SubQuery};
use gridbox_core::metamodel::{RecordStore, SchemaRegistry};
use gridbox_core::node::{IngestReport, Node};
use gridbox_core::proto::ErrorCode;
use gridbox_core::testbed::Testbed;
use rand::seq::SliceRandom;
use rand::Rng;

/// The query answered by one store holding every node's records.
pub fn centralized(nodes: &[&Node], text: &str) -> ResultSet {
    let q = parse_query(text).expect("oracle query parses");
    let mut store = RecordStore::in_memory("central");
    for node in nodes {
        for rec in node.export_records() {
            store.insert_transient(rec);
        }
    }
    let sub = SubQuery {
        target_node: "central".into(),
        kind: q.kind.clone(),
        predicate: q.predicate.clone(),
        projection: q.projection.clone(),
    };
    let mut rs = evaluate_local(&SchemaRegistry::with_baseline(), &store, &sub, "central").expect("oracle evaluates");
    if let Some(sites) = &q.site_filter {
        rs.rows.retain(|r| sites.contains(&r.origin_node));
    }
    rs.rows.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    rs
}

/// Rows keyed by record id, for set comparison.
pub fn row_set(rows: &[Row]) -> BTreeMap<String, Row> {
    rows.iter().map(|r| (r.record_id.clone(), r.clone())).collect()
}

pub fn write_corpus(dir: &Path, studies: usize, seed: u64) -> (Manifest, Vec<PathBuf>) {
    let manifest = corpus::write_corpus(studies, seed, dir).expect("corpus writes");
    let files = manifest.studies.iter().map(|s| dir.join(&s.file)).collect();
    (manifest, files)
}

/// Ingests `files[i]` at `assignment[i]` through operator clients and
/// returns the reports in file order.
pub fn ingest_assigned(bed: &Testbed, files: &[PathBuf], assignment: &[String]) -> Vec<IngestReport> {
    let clients: BTreeMap<String, _> = bed.node_ids().into_iter().map(|id| (id.clone(), bed.client(&id))).collect();
    let mut reports: Vec<Option<IngestReport>> = vec![None; files.len()];
    std::thread::scope(|scope| {
        let handles: Vec<_> = clients
            .iter()
            .map(|(id, client)| {
                let mine: Vec<(usize, &PathBuf)> =
                    files.iter().enumerate().filter(|(i, _)| &assignment[*i] == id).collect();
                scope.spawn(move || {
                    mine.into_iter()
                        .map(|(i, f)| {
                            let report = client
                                .ingest(f.clone())
                                .unwrap_or_else(|e| panic!("ingest {} at {id}: {e}", f.display()));
                            (i, report)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, report) in h.join().expect("ingest thread") {
                reports[i] = Some(report);
            }
        }
    });
    reports.into_iter().map(|r| r.expect("every file ingested")).collect()
}

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items.choose(rng).expect("non-empty")
}

fn cmp_op<R: Rng>(rng: &mut R, ordered: bool) -> &'static str {
    if ordered {
        pick(rng, &["=", "!=", "<", "<=", ">", ">="])
    } else {
        pick(rng, &["=", "!="])
    }
}

fn comparison<R: Rng>(rng: &mut R, kind: &str, nodes: &[String]) -> String {
    match kind {
        "patient" => match rng.gen_range(0..2) {
            0 => format!("birth_year {} {}", cmp_op(rng, true), rng.gen_range(1930..1976)),
            _ => format!("site {} {}", cmp_op(rng, false), nodes.choose(rng).expect("nodes")),
        },
        "study" => match rng.gen_range(0..3) {
            0 => format!(
                "study_date {} \"{}-{:02}-01\"",
                cmp_op(rng, true),
                rng.gen_range(2001..2006),
                rng.gen_range(1..=12)
            ),
            1 => format!("laterality {} {}", cmp_op(rng, false), pick(rng, &["L", "R", "B"])),
            _ => format!("site {} {}", cmp_op(rng, false), nodes.choose(rng).expect("nodes")),
        },
        "image" => match rng.gen_range(0..7) {
            0 => format!("view {} {}", cmp_op(rng, false), pick(rng, &["CC", "MLO"])),
            1 => format!("laterality {} {}", cmp_op(rng, false), pick(rng, &["L", "R"])),
            2 => format!("tube_kvp {} {}", cmp_op(rng, true), rng.gen_range(24..=32)),
            3 => format!("exposure_mas {} {}", cmp_op(rng, true), rng.gen_range(60..=140)),
            4 => format!("detector_gain {} {:.2}", cmp_op(rng, true), rng.gen_range(0.7..1.5)),
            5 => format!("qc_mean {} {:.1}", cmp_op(rng, true), rng.gen_range(300.0..1500.0)),
            _ => format!("qc_contrast {} {:.1}", cmp_op(rng, true), rng.gen_range(200.0..900.0)),
        },
        _ => match rng.gen_range(0..3) {
            0 => format!(
                "finding {} {}",
                cmp_op(rng, false),
                pick(rng, &["normal", "benign", "microcalc-cluster"])
            ),
            1 => format!("annotator_role {} {}", cmp_op(rng, false), pick(rng, &["radiologist", "resident", "cad"])),
            _ => format!("region_shape {} {}", cmp_op(rng, false), pick(rng, &["point", "circle"])),
        },
    }
}

fn predicate<R: Rng>(rng: &mut R, kind: &str, nodes: &[String], depth: u32) -> String {
    if depth == 0 || rng.gen_bool(0.4) {
        return comparison(rng, kind, nodes);
    }
    match rng.gen_range(0..3) {
        0 => format!("NOT ({})", predicate(rng, kind, nodes, depth - 1)),
        1 => format!("({}) AND ({})", predicate(rng, kind, nodes, depth - 1), predicate(rng, kind, nodes, depth - 1)),
        _ => format!("({}) OR ({})", predicate(rng, kind, nodes, depth - 1), predicate(rng, kind, nodes, depth - 1)),
    }
}

const PROJECTIONS: [(&str, &[&str]); 4] = [
    ("patient", &["birth_year", "site"]),
    ("study", &["study_date", "laterality"]),
    ("image", &["view", "lfn", "qc_mean"]),
    ("annotation", &["finding", "image_ref"]),
];

/// A random well-formed query over the baseline schemas.
pub fn random_query<R: Rng>(rng: &mut R, nodes: &[String]) -> String {
    let (kind, attrs) = PROJECTIONS[rng.gen_range(0..PROJECTIONS.len())];
    let mut q = format!("FIND {kind}");
    if rng.gen_bool(0.3) {
        let n = rng.gen_range(1..=attrs.len());
        q.push_str(&format!(" PROJECT {}", attrs[..n].join(",")));
    }
    if rng.gen_bool(0.85) {
        q.push_str(&format!(" WHERE {}", predicate(rng, kind, nodes, 3)));
    }
    if rng.gen_bool(0.2) {
        let mut sites: Vec<String> = nodes.to_vec();
        sites.shuffle(rng);
        sites.truncate(rng.gen_range(1..=nodes.len()));
        q.push_str(&format!(" AT {}", sites.join(",")));
    }
    q
}

/// Replica attributes the oracle tracks per (lfn, node).
type OracleReplica = (String, u64, Checksum, DateTime<Utc>);

/// Outcome of [`catalogue_model`].
#[derive(Debug, Default)]
pub struct ModelStats {
    pub ops: usize,
    pub registered: usize,
    pub removed: usize,
    pub conflicts: usize,
    pub not_found: usize,
    pub live_lfns: usize,
}

fn replica_of(lfn: &LogicalFileName, node: &str, r: &OracleReplica) -> ReplicaEntry {
    ReplicaEntry {
        lfn: lfn.clone(),
        node_id: node.to_owned(),
        local_path: r.0.clone(),
        size_bytes: r.1,
        checksum: r.2,
        registered_at: r.3,
    }
}

fn oracle_replicas(
    oracle: &BTreeMap<LogicalFileName, BTreeMap<String, OracleReplica>>,
    lfn: &LogicalFileName,
) -> Vec<ReplicaEntry> {
    oracle
        .get(lfn)
        .map(|m| m.iter().map(|(n, r)| replica_of(lfn, n, r)).collect())
        .unwrap_or_default()
}

fn full_compare(
    cat: &Catalogue,
    oracle: &BTreeMap<LogicalFileName, BTreeMap<String, OracleReplica>>,
    step: usize,
) -> Result<(), String> {
    let expected: Vec<ReplicaEntry> = oracle.keys().flat_map(|l| oracle_replicas(oracle, l)).collect();
    let actual = cat.snapshot();
    if actual != expected {
        return Err(format!(
            "step {step}: snapshot has {} replicas, oracle {}",
            actual.len(),
            expected.len()
        ));
    }
    Ok(())
}

/// Drives `ops` random register/remove/resolve/list operations against a
/// logged catalogue and a map oracle, comparing after every step. The
/// catalogue is dropped and reopened from its log halfway through.
pub fn catalogue_model(dir: &Path, ops: usize, seed: u64) -> Result<ModelStats, String> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let log = dir.join("catalogue.log");
    let open = || Catalogue::open(&log, Durability::Flush).map_err(|e| format!("open: {e}"));
    let mut cat = open()?;
    let nodes = ["node-a", "node-b", "node-c", "node-d"];
    let sites = ["/site-a", "/site-b", "/site-c"];
    let pool: Vec<LogicalFileName> = (0..ops / 20)
        .map(|i| {
            let site = sites[i % sites.len()];
            LogicalFileName::new(format!("{site}/patient-{:05}/img-{i:06}.smi", i / 7)).unwrap()
        })
        .collect();
    // The content every replica of an lfn must agree on.
    let content = |i: usize| (Checksum::of(&i.to_le_bytes()), 1000 + i as u64);
    let mut oracle: BTreeMap<LogicalFileName, BTreeMap<String, OracleReplica>> = BTreeMap::new();
    let base = Utc.timestamp_opt(1_700_000_000, 0).unwrap();
    let mut stats = ModelStats::default();

    for step in 0..ops {
        if step == ops / 2 {
            drop(cat);
            cat = open()?;
            full_compare(&cat, &oracle, step)?;
        }
        let idx = rng.gen_range(0..pool.len());
        let lfn = &pool[idx];
        let node = nodes[rng.gen_range(0..nodes.len())];
        let roll = rng.gen_range(0..100);
        if roll < 55 {
            let (mut sum, size) = content(idx);
            if rng.gen_ratio(1, 20) {
                sum = Checksum::of(b"divergent");
            }
            let rep = (
                format!("{}/{node}", lfn.as_str().trim_start_matches('/')),
                size,
                sum,
                base + chrono::Duration::milliseconds(step as i64),
            );
            let existing = oracle.get(lfn);
            let clash = existing.is_some_and(|m| {
                m.contains_key(node) || m.values().next().is_some_and(|o| o.2 != sum || o.1 != size)
            });
            let got = cat.register(replica_of(lfn, node, &rep));
            if clash {
                match got {
                    Err(e) if e.code() == ErrorCode::Conflict => stats.conflicts += 1,
                    other => return Err(format!("step {step}: register {lfn}@{node} expected Conflict, got {other:?}")),
                }
            } else {
                oracle.entry(lfn.clone()).or_default().insert(node.to_owned(), rep);
                let want = oracle_replicas(&oracle, lfn);
                match got {
                    Ok(all) if all == want => stats.registered += 1,
                    other => return Err(format!("step {step}: register {lfn}@{node} returned {other:?}")),
                }
            }
        } else if roll < 85 {
            let present = oracle.get(lfn).is_some_and(|m| m.contains_key(node));
            let got = cat.remove_replica(lfn, node);
            if present {
                let m = oracle.get_mut(lfn).unwrap();
                m.remove(node);
                let left = m.len();
                if left == 0 {
                    oracle.remove(lfn);
                }
                match got {
                    Ok(n) if n == left => stats.removed += 1,
                    other => return Err(format!("step {step}: remove {lfn}@{node} returned {other:?}, want {left}")),
                }
            } else {
                match got {
                    Err(e) if e.code() == ErrorCode::NotFound => stats.not_found += 1,
                    other => return Err(format!("step {step}: remove {lfn}@{node} expected NotFound, got {other:?}")),
                }
            }
        } else if roll < 97 {
            let want = oracle_replicas(&oracle, lfn);
            match cat.resolve(lfn) {
                Ok(got) if !want.is_empty() && got == want => {}
                Err(e) if want.is_empty() && e.code() == ErrorCode::NotFound => {}
                other => return Err(format!("step {step}: resolve {lfn} returned {other:?}, want {want:?}")),
            }
        } else {
            let prefix = format!("{}/", sites[rng.gen_range(0..sites.len())]);
            let limit = rng.gen_range(1..200);
            let page = cat.list(&prefix, limit, None).map_err(|e| format!("step {step}: list: {e}"))?;
            let want: Vec<LogicalFileName> = oracle
                .keys()
                .filter(|k| k.as_str().starts_with(&prefix))
                .take(limit)
                .cloned()
                .collect();
            if page.names != want {
                return Err(format!("step {step}: list {prefix} diverged"));
            }
        }
        if cat.len() != oracle.len() {
            return Err(format!("step {step}: {} lfns, oracle {}", cat.len(), oracle.len()));
        }
        stats.ops += 1;
    }
    full_compare(&cat, &oracle, ops)?;
    drop(cat);
    let cat = open()?;
    full_compare(&cat, &oracle, ops)?;
    stats.live_lfns = oracle.len();
    Ok(stats)
}
