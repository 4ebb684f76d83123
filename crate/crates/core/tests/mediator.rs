use std::collections::BTreeMap;
use std::sync::Arc;

use gridbox_core::anonymizer::SiteKey;
use gridbox_core::catalogue::{Catalogue, CatalogueApi, LogicalFileName};
use gridbox_core::corpus;
use gridbox_core::mediator::{Mediator, ResultSet, SubQuery};
use gridbox_core::node::{ImageData, JobResult, JobSpec, Node, NodeApi, NodeOptions, Outcome};
use gridbox_core::Result;

struct Federation {
    _dirs: Vec<tempfile::TempDir>,
    nodes: BTreeMap<String, Arc<Node>>,
    catalogue: Arc<Catalogue>,
}

fn federation(studies_per_node: &[usize]) -> Federation {
    let catalogue = Arc::new(Catalogue::in_memory());
    let mut dirs = Vec::new();
    let mut nodes = BTreeMap::new();
    for (i, &count) in studies_per_node.iter().enumerate() {
        let id = format!("node-{}", (b'a' + i as u8) as char);
        let dir = tempfile::tempdir().unwrap();
        let node = Node::open(
            NodeOptions {
                node_id: id.clone(),
                data_dir: dir.path().to_path_buf(),
                site_key: SiteKey::from_bytes([i as u8 + 1; 32]),
                workers: 2,
            },
            catalogue.clone() as Arc<dyn CatalogueApi>,
        )
        .unwrap();
        for (container, _) in corpus::generate(count, 11 + i as u64) {
            node.ingest_study(container).unwrap();
        }
        dirs.push(dir);
        nodes.insert(id, Arc::new(node));
    }
    Federation { _dirs: dirs, nodes, catalogue }
}

fn members(fed: &Federation) -> BTreeMap<String, Arc<dyn NodeApi>> {
    fed.nodes.iter().map(|(id, n)| (id.clone(), n.clone() as Arc<dyn NodeApi>)).collect()
}

fn mediator(fed: &Federation, members: BTreeMap<String, Arc<dyn NodeApi>>, threshold: u64) -> Mediator {
    let registry = fed.nodes["node-a"].registry();
    Mediator::new("node-a", members, fed.catalogue.clone() as Arc<dyn CatalogueApi>, registry, threshold)
}

/// Forwards to a node but flips one byte of the image served for `victim`.
struct Tamper {
    inner: Arc<Node>,
    victim: LogicalFileName,
}

impl NodeApi for Tamper {
    fn node_id(&self) -> &str {
        self.inner.node_id()
    }

    fn local_query(&self, sub: &SubQuery) -> Result<ResultSet> {
        self.inner.local_query(sub)
    }

    fn run_job(&self, spec: &JobSpec) -> Result<JobResult> {
        self.inner.run_job(spec)
    }

    fn fetch_image(&self, lfn: &LogicalFileName) -> Result<ImageData> {
        let mut img = self.inner.fetch_image(lfn)?;
        if lfn == &self.victim {
            let mid = img.data.len() / 2;
            img.data[mid] ^= 0x5a;
        }
        Ok(img)
    }
}

#[test]
fn empty_federation_answers_with_no_rows() {
    let fed = federation(&[0, 0, 0]);
    let m = mediator(&fed, members(&fed), u64::MAX);
    for kind in ["patient", "study", "image", "annotation"] {
        let rs = m.query(&format!("FIND {kind}")).unwrap();
        assert!(rs.rows.is_empty(), "{kind}: {:?}", rs.rows);
        assert_eq!(rs.answered, ["node-a", "node-b", "node-c"]);
        assert!(rs.unreachable.is_empty());
    }
}

#[test]
fn tampered_transfer_is_an_integrity_error_for_that_input_only() {
    let fed = federation(&[2, 3]);
    let inputs: Vec<LogicalFileName> = fed
        .nodes
        .values()
        .flat_map(|n| n.local_images().into_keys())
        .collect();
    let victim = fed.nodes["node-b"].local_images().into_keys().next().unwrap();
    let spec = JobSpec::new("qc_metrics", inputs.clone());

    let honest = mediator(&fed, members(&fed), u64::MAX).run_job(spec.clone()).unwrap();
    assert!(honest.entries.iter().all(|e| e.outcome == Outcome::Ok));

    let mut tampered = members(&fed);
    tampered.insert(
        "node-b".into(),
        Arc::new(Tamper { inner: fed.nodes["node-b"].clone(), victim: victim.clone() }),
    );
    let result = mediator(&fed, tampered, u64::MAX).run_job(spec).unwrap();
    assert_eq!(result.entries.len(), inputs.len());
    for (got, want) in result.entries.iter().zip(&honest.entries) {
        assert_eq!(got.lfn, want.lfn);
        if got.lfn == victim {
            assert_eq!(got.outcome, Outcome::IntegrityError, "{got:?}");
            assert!(got.output.is_none());
        } else {
            assert_eq!(got.outcome, Outcome::Ok, "{got:?}");
            assert_eq!(got.output, want.output);
        }
    }
}

#[test]
fn execute_at_data_never_fetches() {
    let fed = federation(&[1, 1]);
    let victims: Vec<LogicalFileName> = fed.nodes["node-b"].local_images().into_keys().collect();
    let mut tampered = members(&fed);
    tampered.insert(
        "node-b".into(),
        Arc::new(Tamper { inner: fed.nodes["node-b"].clone(), victim: victims[0].clone() }),
    );
    let result = mediator(&fed, tampered, 0).run_job(JobSpec::new("breast_density", victims.clone())).unwrap();
    assert!(result.entries.iter().all(|e| e.outcome == Outcome::Ok && e.executed_at.as_deref() == Some("node-b")));
}
