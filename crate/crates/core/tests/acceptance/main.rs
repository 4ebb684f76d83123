//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p gridbox-core --test acceptance`.

#[path = "../common/mod.rs"]
mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use aho_corasick::AhoCorasick;
use common::{centralized, ingest_assigned, random_query, row_set, write_corpus};
use gridbox_core::catalogue::LogicalFileName;
use gridbox_core::corpus::{self, Manifest};
use gridbox_core::mediator::{parse_query, Placement};
use gridbox_core::imaging::{breast_density, detect_microcalcs, qc_metrics, standardize, AcquisitionParams, DetectorParams, ImageVolume};
use gridbox_core::node::{Algorithm, Invocation, IngestReport, JobSpec, NodeApi, Outcome};
use gridbox_core::testbed::{Testbed, TestbedOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

const STUDIES: usize = 300;
const CORPUS_SEED: u64 = 20_040_201;
const PARTITIONS: usize = 5;
const QUERIES: usize = 50;
const QUERY_SEED: u64 = 77;
const TIME_BUDGET: Duration = Duration::from_secs(300);
const DEAD: &str = "node-c";

type Verdict = Result<String, String>;

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    let msg = p
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown payload".into());
    format!("panicked: {msg}")
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| Err(panic_message(p)))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Verdicts of the criteria that share the federated runs.
struct FederationVerdicts {
    transparency: Verdict,
    jobs: Verdict,
    wire: Verdict,
    partial: Verdict,
}

#[derive(Default)]
struct Tally {
    queries: usize,
    non_empty: usize,
    mismatches: Vec<String>,
    elapsed: Duration,
}

#[derive(Default)]
struct WireTally {
    frames: usize,
    bytes: usize,
    leaks: Vec<String>,
    reid_checks: usize,
    reid_errors: Vec<String>,
    at_rest_files: usize,
}

fn all_lfns(bed: &Testbed) -> BTreeMap<LogicalFileName, String> {
    bed.node_ids()
        .into_iter()
        .flat_map(|id| bed.node(&id).local_images().into_keys().map(move |l| (l, id.clone())))
        .collect()
}

fn needles(manifest: &Manifest) -> Vec<String> {
    let set: BTreeSet<String> = manifest
        .studies
        .iter()
        .flat_map(|s| [s.patient_id.clone(), s.patient_name.clone()])
        .collect();
    set.into_iter().collect()
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) {
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                files_under(&p, out);
            } else {
                out.push(p);
            }
        }
    }
}

fn run_queries(bed: &Testbed, queries: &[String], entries: &[String], live: &[String], tally: &mut Tally, label: &str) {
    let nodes: Vec<_> = live.iter().map(|id| bed.node(id).as_ref()).collect();
    let dead: Vec<String> = bed.node_ids().into_iter().filter(|id| !live.contains(id)).collect();
    for (qi, text) in queries.iter().enumerate() {
        let entry = &entries[qi % entries.len()];
        tally.queries += 1;
        let got = match bed.client(entry).federated_query(text) {
            Ok(rs) => rs,
            Err(e) => {
                tally.mismatches.push(format!("{label} `{text}` via {entry}: {e}"));
                continue;
            }
        };
        let want = centralized(&nodes, text);
        tally.non_empty += usize::from(!want.rows.is_empty());
        let sites = parse_query(text).expect("generated queries parse").site_filter;
        let targeted = |id: &String| sites.as_ref().is_none_or(|s| s.contains(id));
        let want_answered: Vec<&String> = live.iter().filter(|id| targeted(id)).collect();
        let want_unreachable: Vec<&String> = dead.iter().filter(|id| targeted(id)).collect();
        if got.unreachable.iter().collect::<Vec<_>>() != want_unreachable
            || got.answered.iter().collect::<Vec<_>>() != want_answered
        {
            tally.mismatches.push(format!(
                "{label} `{text}`: answered {:?} unreachable {:?}",
                got.answered, got.unreachable
            ));
        } else if row_set(&got.rows) != row_set(&want.rows) {
            tally.mismatches.push(format!(
                "{label} `{text}`: {} rows, centralized {}",
                got.rows.len(),
                want.rows.len()
            ));
        }
    }
}

/// In-process reference outputs: every algorithm on every image, read
/// straight from the holding node's store.
fn reference_outputs(bed: &Testbed, lfns: &BTreeMap<LogicalFileName, String>, alg: Algorithm) -> BTreeMap<LogicalFileName, Value> {
    let invocation = Invocation::from_spec(&JobSpec::new(alg.name(), vec![])).expect("default parameters");
    lfns.iter()
        .map(|(l, holder)| {
            let data = bed.node(holder).fetch_image(l).expect("local read").data;
            (l.clone(), invocation.run(&data).expect("reference run"))
        })
        .collect()
}

fn job_equivalence(bed: &Testbed) -> Verdict {
    let lfns = all_lfns(bed);
    let inputs: Vec<LogicalFileName> = lfns.keys().cloned().collect();
    let client = bed.client("node-a");
    let mut checked = 0;
    for alg in Algorithm::ALL {
        let reference = reference_outputs(bed, &lfns, alg);
        for threshold in [u64::MAX, 0] {
            let result = client
                .run_federated_job(JobSpec::new(alg.name(), inputs.clone()), Some(threshold))
                .map_err(|e| format!("{alg} at threshold {threshold}: {e}"))?;
            let decision = result.placement.as_ref().ok_or("no placement decision")?;
            let expect_remote = threshold == 0;
            ensure(
                decision
                    .choices
                    .iter()
                    .all(|c| matches!(c.placement, Placement::ExecuteAtData { .. }) == expect_remote),
                || format!("{alg}: threshold {threshold} did not force a single placement"),
            )?;
            ensure(result.entries.len() == inputs.len(), || format!("{alg}: {} entries", result.entries.len()))?;
            for e in &result.entries {
                ensure(e.outcome == Outcome::Ok, || format!("{alg} {}: {:?} {:?}", e.lfn, e.outcome, e.detail))?;
                ensure(e.output.as_ref() == Some(&reference[&e.lfn]), || {
                    format!("{alg} {} at threshold {threshold} differs from in-process output", e.lfn)
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{} algorithms x 2 placements x {} images: {checked} outputs identical to in-process runs",
        Algorithm::ALL.len(),
        inputs.len()
    ))
}

/// After `DEAD` is down: inputs held there are unreachable, the rest match.
fn degraded_job(bed: &Testbed) -> Result<usize, String> {
    let lfns = all_lfns(bed);
    let reference = reference_outputs(bed, &lfns, Algorithm::QcMetrics);
    let mut checked = 0;
    for threshold in [u64::MAX, 0] {
        let inputs = lfns.keys().cloned().collect();
        let result = bed
            .client("node-a")
            .run_federated_job(JobSpec::new("qc_metrics", inputs), Some(threshold))
            .map_err(|e| format!("degraded job: {e}"))?;
        ensure(result.unreachable == [DEAD], || format!("job unreachable {:?}", result.unreachable))?;
        for e in &result.entries {
            if lfns[&e.lfn] == DEAD {
                ensure(e.outcome == Outcome::Unreachable, || format!("{}: {:?}", e.lfn, e.outcome))?;
            } else {
                ensure(e.outcome == Outcome::Ok && e.output.as_ref() == Some(&reference[&e.lfn]), || {
                    format!("{} on a live node: {:?}", e.lfn, e.outcome)
                })?;
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn reid_locality(bed: &Testbed, manifest: &Manifest, assignment: &[String], reports: &[IngestReport], wire: &mut WireTally) {
    for ((truth, origin), report) in manifest.studies.iter().zip(assignment).zip(reports) {
        for id in bed.node_ids() {
            let found = bed.node(&id).reidentify(&report.pseudonym);
            wire.reid_checks += 1;
            match found {
                Some(ids) if &id == origin && ids.patient_id == truth.patient_id => {}
                None if &id != origin => {}
                other => wire.reid_errors.push(format!(
                    "{} at {id} (origin {origin}): {:?}",
                    report.pseudonym,
                    other.map(|i| i.patient_id)
                )),
            }
        }
    }
}

fn scan_at_rest(bed: &Testbed, finder: &AhoCorasick, wire: &mut WireTally) {
    let mut files = Vec::new();
    for dir in bed.data_dirs().values() {
        files_under(dir, &mut files);
    }
    files.push(bed.root().join("catalogue.log"));
    for f in files {
        let Ok(bytes) = std::fs::read(&f) else { continue };
        wire.at_rest_files += 1;
        if let Some(m) = finder.find(&bytes) {
            wire.reid_errors.push(format!("plaintext identifier in {} at byte {}", f.display(), m.start()));
        }
    }
}

fn scan_wire(bed: &Testbed, finder: &AhoCorasick, needles: &[String], wire: &mut WireTally) {
    let recorder = bed.recorder().expect("recording testbed");
    for c in recorder.captures() {
        wire.frames += c.frames().len();
        wire.bytes += c.bytes.len();
        if let Some(m) = finder.find(&c.bytes) {
            wire.leaks.push(format!("`{}` on {}", needles[m.pattern().as_usize()], c.link));
        }
    }
}

fn federation_suite() -> FederationVerdicts {
    let started = Instant::now();
    let corpus_dir = tempfile::tempdir().expect("tempdir");
    let (manifest, files) = write_corpus(corpus_dir.path(), STUDIES, CORPUS_SEED);
    let needles = needles(&manifest);
    let finder = AhoCorasick::new(&needles).expect("patterns build");
    let ids: Vec<String> = ["node-a", "node-b", "node-c"].map(String::from).to_vec();
    let mut qrng = ChaCha8Rng::seed_from_u64(QUERY_SEED);
    let queries: Vec<String> = (0..QUERIES).map(|_| random_query(&mut qrng, &ids)).collect();
    let survivors: Vec<String> = ids.iter().filter(|id| id.as_str() != DEAD).cloned().collect();

    let mut tally = Tally::default();
    let mut partial = Tally::default();
    let mut wire = WireTally::default();
    let mut jobs: Verdict = Err("not run".into());
    let mut degraded: Result<usize, String> = Err("not run".into());
    let mut setup_time = Duration::ZERO;
    let mut killed_at = 0;

    // The scanner must see identifiers where they do exist.
    let raw: Vec<u8> = std::fs::read(&files[0]).expect("corpus file");
    let scanner_sane = finder.find(&raw).is_some();

    for p in 0..PARTITIONS {
        let t0 = Instant::now();
        let mut bed = Testbed::start(TestbedOptions {
            record: true,
            ..TestbedOptions::default()
        })
        .expect("testbed starts");
        assert_eq!(bed.node_ids(), ids);
        let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED + p as u64);
        let assignment: Vec<String> = files.iter().map(|_| ids[rng.gen_range(0..ids.len())].clone()).collect();
        let reports = ingest_assigned(&bed, &files, &assignment);
        setup_time += t0.elapsed();
        reid_locality(&bed, &manifest, &assignment, &reports, &mut wire);

        let label = format!("partition {p}");
        let q0 = Instant::now();
        run_queries(&bed, &queries, &ids, &ids, &mut tally, &label);
        tally.elapsed += q0.elapsed();
        if p + 1 == PARTITIONS {
            let (before, after) = queries.split_at(QUERIES / 2);
            run_queries(&bed, before, &ids, &ids, &mut partial, &label);
            bed.stop_node(DEAD);
            killed_at = partial.queries;
            run_queries(&bed, after, &survivors, &survivors, &mut partial, &label);
            degraded = degraded_job(&bed);
        }
        if p == 0 {
            jobs = guarded(|| job_equivalence(&bed));
        }
        scan_wire(&bed, &finder, &needles, &mut wire);
        scan_at_rest(&bed, &finder, &mut wire);
    }
    let total = started.elapsed();

    let transparency = if !tally.mismatches.is_empty() {
        Err(format!("{} of {} queries differ; first: {}", tally.mismatches.len(), tally.queries, tally.mismatches[0]))
    } else if total > TIME_BUDGET {
        Err(format!("exact, but took {:.1}s (budget {}s)", total.as_secs_f64(), TIME_BUDGET.as_secs()))
    } else if tally.non_empty < tally.queries / 2 {
        Err(format!("only {} of {} queries returned rows", tally.non_empty, tally.queries))
    } else {
        Ok(format!(
            "{STUDIES} studies, {PARTITIONS} partitions, {} queries ({} non-empty) equal the centralized store; \
             ingest {:.1}s, queries {:.1}s, total {:.1}s",
            tally.queries,
            tally.non_empty,
            setup_time.as_secs_f64(),
            tally.elapsed.as_secs_f64(),
            total.as_secs_f64()
        ))
    };

    let wire_verdict = if !scanner_sane {
        Err("scanner failed to find identifiers in a raw container".into())
    } else if !wire.leaks.is_empty() {
        Err(format!("{} captures carry identifiers; first: {}", wire.leaks.len(), wire.leaks[0]))
    } else if !wire.reid_errors.is_empty() {
        Err(format!("{} locality violations; first: {}", wire.reid_errors.len(), wire.reid_errors[0]))
    } else {
        Ok(format!(
            "0 of {} frames ({:.1} MB) carry any of {} identifiers; {} re-identification lookups local-only; \
             {} files at rest clean",
            wire.frames,
            wire.bytes as f64 / 1e6,
            needles.len(),
            wire.reid_checks,
            wire.at_rest_files
        ))
    };

    let partial_verdict = match (&partial.mismatches.first(), degraded) {
        (Some(first), _) => Err(format!("{} of {} degraded queries wrong; first: {first}", partial.mismatches.len(), partial.queries)),
        (None, Err(e)) => Err(e),
        (None, Ok(entries)) => Ok(format!(
            "{DEAD} killed after {} of {} queries; the {} later ones name it unreachable with survivors' rows exact; \
             {entries} job entries degrade correctly",
            killed_at,
            partial.queries,
            partial.queries - killed_at
        )),
    };

    FederationVerdicts {
        transparency,
        jobs,
        wire: wire_verdict,
        partial: partial_verdict,
    }
}

fn catalogue_model() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let stats = common::catalogue_model(dir.path(), 100_000, 0xCA7A)?;
    Ok(format!(
        "{} ops ({} registers, {} removes, {} conflicts, {} misses) match the map oracle across a restart; \
         {} live lfns; {:.1}s",
        stats.ops,
        stats.registered,
        stats.removed,
        stats.conflicts,
        stats.not_found,
        stats.live_lfns,
        t0.elapsed().as_secs_f64()
    ))
}

fn relative(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Two-pass mean and population standard deviation.
fn brute_qc(pixels: &[u16]) -> (f64, f64) {
    let n = pixels.len() as f64;
    let mean = pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = pixels.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn render(tissue: &[f64], w: usize, h: usize, p: &AcquisitionParams) -> ImageVolume {
    let r = AcquisitionParams::REFERENCE;
    let scale = p.detector_gain * p.exposure_factor() / (r.detector_gain * r.exposure_factor());
    let pixels = tissue
        .iter()
        .map(|&t| ((t - r.detector_offset) * scale + p.detector_offset).round().clamp(0.0, 65535.0) as u16)
        .collect();
    ImageVolume::new(w, h, pixels, corpus::SPACING_MM).expect("valid image")
}

fn max_abs_diff(a: &ImageVolume, b: &ImageVolume) -> u16 {
    a.pixels().iter().zip(b.pixels()).map(|(x, y)| x.abs_diff(*y)).max().unwrap_or(0)
}

fn imaging_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // Quality control against a two-pass brute force.
    let mut worst_qc = 0f64;
    let mut qc_images = 0;
    for i in 0..40 {
        let (w, h) = (rng.gen_range(16..200), rng.gen_range(16..200));
        let hi: u16 = if i % 4 == 0 { u16::MAX } else { rng.gen_range(1..5000) };
        let pixels: Vec<u16> = (0..w * h).map(|_| rng.gen_range(0..=hi)).collect();
        let img = ImageVolume::new(w, h, pixels, 0.1).expect("image");
        let got = qc_metrics(&img);
        let (mean, sd) = brute_qc(img.pixels());
        worst_qc = worst_qc.max(relative(got.mean_brightness, mean)).max(relative(got.contrast, sd));
        qc_images += 1;
    }
    for ph in corpus::calc_benchmark(10, 8, 10.0) {
        let got = qc_metrics(&ph.image);
        let (mean, sd) = brute_qc(ph.image.pixels());
        worst_qc = worst_qc.max(relative(got.mean_brightness, mean)).max(relative(got.contrast, sd));
        qc_images += 1;
    }
    ensure(worst_qc <= 1e-9, || format!("qc relative error {worst_qc:e}"))?;

    // Standardization: identity at the reference point, invariance across
    // two renderings of one tissue map.
    let reference = AcquisitionParams::REFERENCE;
    let mut worst_identity = 0;
    let mut worst_pair = 0;
    let point = |rng: &mut ChaCha8Rng| AcquisitionParams {
        tube_kvp: rng.gen_range(28.0..34.0),
        exposure_mas: rng.gen_range(100.0..160.0),
        detector_gain: rng.gen_range(1.0..1.6),
        detector_offset: rng.gen_range(0.0..200.0),
    };
    for ph in corpus::calc_benchmark(20, 9, 10.0) {
        let (w, h) = (ph.image.width(), ph.image.height());
        let at_ref = render(&ph.tissue, w, h, &reference);
        let same = standardize(&at_ref, &reference, &reference).map_err(|e| e.to_string())?;
        worst_identity = worst_identity.max(max_abs_diff(&same, &at_ref));
        let p = point(&mut rng);
        let arbitrary = render(&ph.tissue, w, h, &p);
        let back = standardize(&arbitrary, &p, &p).map_err(|e| e.to_string())?;
        worst_identity = worst_identity.max(max_abs_diff(&back, &arbitrary));
        let (p1, p2) = (point(&mut rng), point(&mut rng));
        let s1 = standardize(&render(&ph.tissue, w, h, &p1), &p1, &reference).map_err(|e| e.to_string())?;
        let s2 = standardize(&render(&ph.tissue, w, h, &p2), &p2, &reference).map_err(|e| e.to_string())?;
        worst_pair = worst_pair.max(max_abs_diff(&s1, &s2));
    }
    ensure(worst_identity <= 1, || format!("standardize identity error {worst_identity} counts"))?;
    ensure(worst_pair <= 1, || format!("two-rendering error {worst_pair} counts"))?;

    // Planted micro-calcification benchmark.
    let params = DetectorParams::default();
    let (mut planted, mut found, mut false_hits, mut worst_image, mut sq) = (0usize, 0usize, 0usize, 0usize, 0f64);
    let bench = corpus::calc_benchmark(100, 2024, 10.0);
    for ph in &bench {
        let got = detect_microcalcs(&ph.image, params.min_snr, params.window).map_err(|e| e.to_string())?;
        let mut used = vec![false; got.locations.len()];
        for &(x, y) in &ph.truth.calcifications {
            planted += 1;
            let nearest = (0..got.locations.len())
                .filter(|&j| !used[j])
                .map(|j| (j, (got.locations[j].x - x).hypot(got.locations[j].y - y)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, d)) = nearest.filter(|&(_, d)| d <= 3.0) {
                used[j] = true;
                found += 1;
                sq += d * d;
            }
        }
        let fp = used.iter().filter(|u| !**u).count();
        false_hits += fp;
        worst_image = worst_image.max(fp);
    }
    let recall = found as f64 / planted as f64;
    let fp_rate = false_hits as f64 / bench.len() as f64;
    let rms = (sq / found.max(1) as f64).sqrt();
    ensure(recall >= 0.95, || format!("recall {found}/{planted}"))?;
    ensure(fp_rate <= 1.0, || format!("{false_hits} false detections over {} images", bench.len()))?;
    ensure(rms <= 1.5, || format!("localization RMS {rms:.3} px"))?;

    // Bimodal density fixtures: two equal tissue populations.
    let mut worst_density = 0f64;
    let exact: Vec<u16> = (0..64 * 64).map(|i| if i < 3000 { if i % 2 == 0 { 1000 } else { 3000 } } else { 0 }).collect();
    let noisy_lo = Normal::new(900.0f64, 40.0).expect("normal");
    let noisy_hi = Normal::new(2600.0f64, 60.0).expect("normal");
    let noisy: Vec<u16> = (0..128 * 128)
        .map(|i| match i % 5 {
            0 => 0,
            1 | 3 => noisy_lo.sample(&mut rng).round().max(1.0) as u16,
            _ => noisy_hi.sample(&mut rng).round() as u16,
        })
        .collect();
    for (w, pixels) in [(64, exact), (128, noisy)] {
        let img = ImageVolume::new(w, w, pixels, 0.1).expect("image");
        let d = breast_density(&img).map_err(|e| e.to_string())?;
        worst_density = worst_density.max((d.dense_fraction - 0.5).abs());
    }
    ensure(worst_density <= 0.01, || format!("bimodal density off by {worst_density:.4}"))?;

    Ok(format!(
        "qc max rel err {worst_qc:.1e} over {qc_images} images; standardize identity {worst_identity}, \
         two-rendering {worst_pair} counts; calc recall {found}/{planted}, {fp_rate:.2} FP/image \
         (max {worst_image}), RMS {rms:.3} px; density |f-0.5| {worst_density:.4}"
    ))
}

fn golden_frames() -> Verdict {
    let failures = common::golden::check_all();
    if failures.is_empty() {
        Ok(format!(
            "{} checked-in frames decode to their messages and re-encode bit-identically",
            common::golden::expectations().len()
        ))
    } else {
        Err(failures.join("; "))
    }
}

fn main() -> ExitCode {
    let FederationVerdicts { transparency, jobs, wire, partial } = catch_unwind(federation_suite)
        .unwrap_or_else(|p| {
            let msg = panic_message(p);
            FederationVerdicts {
                transparency: Err(msg.clone()),
                jobs: Err(msg.clone()),
                wire: Err(msg.clone()),
                partial: Err(msg),
            }
        });
    let results = [
        ("1", "federation transparency", transparency),
        ("2", "job equivalence", jobs),
        ("3", "catalogue model", guarded(catalogue_model)),
        ("4", "anonymity wire scan", wire),
        ("5", "imaging oracles", guarded(imaging_oracles)),
        ("6", "protocol golden files", guarded(golden_frames)),
        ("7", "partial-failure degradation", partial),
    ];
    let mut failed = 0;
    for (id, name, verdict) in &results {
        match verdict {
            Ok(detail) => println!("PASS [{id}] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
