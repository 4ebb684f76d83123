mod common;

use std::collections::BTreeMap;

use common::{centralized, ingest_assigned, random_query, row_set, write_corpus};
use gridbox_core::catalogue::LogicalFileName;
use gridbox_core::node::{Algorithm, Invocation, JobSpec, NodeApi, Outcome};
use gridbox_core::testbed::{Testbed, TestbedOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn federation(studies: usize, seed: u64, opts: TestbedOptions) -> (Testbed, tempfile::TempDir) {
    let bed = Testbed::start(opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (_, files) = write_corpus(dir.path(), studies, seed);
    let ids = bed.node_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment: Vec<String> = files.iter().map(|_| ids[rng.gen_range(0..ids.len())].clone()).collect();
    ingest_assigned(&bed, &files, &assignment);
    (bed, dir)
}

fn all_lfns(bed: &Testbed) -> Vec<LogicalFileName> {
    let mut lfns: Vec<_> = bed.node_ids().iter().flat_map(|id| bed.node(id).local_images().into_keys()).collect();
    lfns.sort();
    lfns
}

#[test]
fn federated_queries_match_the_centralized_store() {
    let (bed, _dir) = federation(24, 5, TestbedOptions::default());
    let ids = bed.node_ids();
    let nodes: Vec<_> = ids.iter().map(|id| bed.node(id).as_ref()).collect();
    let client = bed.client("node-b");
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut non_empty = 0;
    for _ in 0..25 {
        let text = random_query(&mut rng, &ids);
        let got = client.federated_query(&text).unwrap_or_else(|e| panic!("{text}: {e}"));
        let want = centralized(&nodes, &text);
        assert!(got.unreachable.is_empty(), "{text}");
        assert_eq!(row_set(&got.rows), row_set(&want.rows), "{text}");
        assert_eq!(got.record_ids(), want.record_ids(), "rows come sorted by record id");
        non_empty += usize::from(!got.rows.is_empty());
    }
    assert!(non_empty >= 10, "only {non_empty} queries returned rows");
}

#[test]
fn a_stopped_node_is_named_and_the_rest_is_complete() {
    let (mut bed, _dir) = federation(15, 8, TestbedOptions::default());
    bed.stop_node("node-c");
    let survivors = [bed.node("node-a").as_ref(), bed.node("node-b").as_ref()];
    for text in ["FIND image", "FIND study WHERE laterality != B", "FIND patient PROJECT birth_year"] {
        let got = bed.client("node-a").federated_query(text).unwrap();
        assert_eq!(got.unreachable, ["node-c"], "{text}");
        assert_eq!(got.answered, ["node-a", "node-b"]);
        assert_eq!(row_set(&got.rows), row_set(&centralized(&survivors, text).rows), "{text}");
    }
}

#[test]
fn job_outputs_do_not_depend_on_placement() {
    let (bed, _dir) = federation(9, 21, TestbedOptions::default());
    let lfns = all_lfns(&bed);
    let holder: BTreeMap<&LogicalFileName, String> = bed
        .node_ids()
        .into_iter()
        .flat_map(|id| {
            let imgs = bed.node(&id).local_images();
            lfns.iter().filter(move |l| imgs.contains_key(*l)).map(move |l| (l, id.clone()))
        })
        .collect();
    let client = bed.client("node-a");
    for alg in Algorithm::ALL {
        let spec = JobSpec::new(alg.name(), lfns.clone());
        let invocation = Invocation::from_spec(&spec).unwrap();
        let reference: BTreeMap<&LogicalFileName, serde_json::Value> = lfns
            .iter()
            .map(|l| {
                let data = bed.node(&holder[l]).fetch_image(l).unwrap().data;
                (l, invocation.run(&data).unwrap())
            })
            .collect();
        for threshold in [u64::MAX, 0] {
            let result = client.run_federated_job(spec.clone(), Some(threshold)).unwrap();
            assert!(result.unreachable.is_empty());
            let decision = result.placement.as_ref().expect("federated jobs carry their placement");
            assert_eq!(decision.threshold_bytes, threshold);
            assert_eq!(result.entries.len(), lfns.len());
            for e in &result.entries {
                assert_eq!(e.outcome, Outcome::Ok, "{alg:?} {}: {:?}", e.lfn, e.detail);
                assert_eq!(e.output.as_ref(), Some(&reference[&e.lfn]), "{alg:?} {}", e.lfn);
            }
        }
    }
}

#[test]
fn identifiers_never_cross_the_wire() {
    let opts = TestbedOptions {
        record: true,
        ..TestbedOptions::default()
    };
    let bed = Testbed::start(opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (manifest, files) = write_corpus(dir.path(), 12, 3);
    let ids = bed.node_ids();
    let assignment: Vec<String> = (0..files.len()).map(|i| ids[i % ids.len()].clone()).collect();
    ingest_assigned(&bed, &files, &assignment);
    let client = bed.client("node-c");
    client.federated_query("FIND patient").unwrap();
    client.federated_query("FIND image WHERE view = CC").unwrap();
    client.run_federated_job(JobSpec::new("qc_metrics", all_lfns(&bed)), Some(u64::MAX)).unwrap();

    let recorder = bed.recorder().unwrap();
    let captures = recorder.captures();
    assert!(captures.iter().map(|c| c.frames().len()).sum::<usize>() > 50);
    let needles: Vec<&str> = manifest
        .studies
        .iter()
        .flat_map(|s| [s.patient_id.as_str(), s.patient_name.as_str()])
        .collect();
    for c in &captures {
        for n in &needles {
            assert!(
                !c.bytes.windows(n.len()).any(|w| w == n.as_bytes()),
                "`{n}` crossed {}",
                c.link
            );
        }
    }
}
