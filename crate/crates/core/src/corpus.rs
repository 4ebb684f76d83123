//! Seeded synthetic mammogram corpus with planted ground truth.
//!
//! Each study holds a CC and an MLO view of one breast. An image is a
//! half-ellipse of tissue against a zero background: a fatty baseline,
//! a smoothly blended dense region, a thin skin taper at the boundary and
//! a few 2x2 micro-calcifications. Tissue is rendered through a simulated
//! detector as `v = g * t * E + b + noise` where `E` is the exposure factor
//! relative to the reference operating point, so standardizing to the
//! reference recovers `t` up to noise. Output is a pure function of
//! `(studies, seed)`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::{AcquisitionParams, ImageVolume};
use crate::node::container::{AnnotationHeader, Container, ContainerHeader, ImageHeader};
use crate::Result;

pub const IMAGE_SIZE: usize = 128;
pub const SPACING_MM: f64 = 0.2;
/// Detector noise standard deviation, in counts.
pub const NOISE_SIGMA: f64 = 20.0;
pub const MANIFEST_FILE: &str = "manifest.json";

const FAT_LEVEL: f64 = 1000.0;
const DENSE_LEVEL: f64 = 1500.0;
/// Normalized depth over which tissue ramps up from the skin line.
const SKIN_TAPER: f64 = 0.25;
/// Calcifications stay this far from the image border and from each other.
const CALC_MARGIN: f64 = 12.0;

const SURNAMES: [&str; 16] = [
    "ABERNATHY", "BALDWIN", "CARRASCO", "DUBOIS", "ERIKSEN", "FONTAINE", "GALLAGHER", "HOLLOWAY",
    "IVANOVA", "JANSSEN", "KOWALSKI", "LINDQVIST", "MORETTI", "NAKAMURA", "OKONKWO", "PETROVIC",
];
const GIVEN_NAMES: [&str; 12] = [
    "ADA", "BEATRIZ", "CLARA", "DORIS", "ELENA", "FRIEDA", "GRETA", "HANNA", "INGRID", "JUNE", "KARIN", "LUCIA",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub studies: Vec<StudyTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTruth {
    pub file: String,
    pub study_id: String,
    pub patient_id: String,
    pub patient_name: String,
    pub images: Vec<ImageTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub view: String,
    pub laterality: String,
    /// Fraction of breast pixels inside the planted dense region.
    pub dense_fraction: f64,
    /// Centers of the planted 2x2 calcifications, in pixel coordinates.
    pub calcifications: Vec<(f64, f64)>,
    /// Peak calcification amplitude in units of [`NOISE_SIGMA`].
    pub calc_snr: Vec<f64>,
    pub acquisition: AcquisitionParams,
}

/// Calcification amplitude policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalcAmplitude {
    /// Uniform in `10..20` noise sigmas.
    Varied,
    /// Exactly this many noise sigmas.
    Fixed(f64),
}

/// One rendered view plus its truth.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: ImageVolume,
    /// Noise-free tissue map at the reference operating point.
    pub tissue: Vec<f64>,
    pub truth: ImageTruth,
}

struct Patient {
    id: String,
    name: String,
    birth_date: String,
}

/// Generates `studies` containers with their ground truth.
pub fn generate(studies: usize, seed: u64) -> Vec<(Container, StudyTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patient_count = (studies * 2 / 3).max(1);
    let patients: Vec<Patient> = (0..patient_count).map(|i| patient(&mut rng, i)).collect();
    (0..studies)
        .map(|i| {
            let p = &patients[rng.gen_range(0..patients.len())];
            study(&mut rng, i, p)
        })
        .collect()
}

/// Writes `study-NNNN.mgc` files and the manifest into `dir`.
pub fn write_corpus(studies: usize, seed: u64, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        seed,
        studies: Vec::with_capacity(studies),
    };
    for (container, truth) in generate(studies, seed) {
        container.write(&dir.join(&truth.file))?;
        manifest.studies.push(truth);
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// The planted-spot benchmark: `count` breast phantoms, each carrying 1 to
/// 3 calcifications of exactly `snr` noise sigmas.
pub fn calc_benchmark(count: usize, seed: u64, snr: f64) -> Vec<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let lat = if i % 2 == 0 { "L" } else { "R" };
            let view = if i % 4 < 2 { "CC" } else { "MLO" };
            let n = rng.gen_range(1..=3);
            phantom(&mut rng, view, lat, n, CalcAmplitude::Fixed(snr))
        })
        .collect()
}

fn patient(rng: &mut ChaCha8Rng, i: usize) -> Patient {
    let suffix: String = (0..2).map(|_| rng.gen_range(b'A'..=b'Z') as char).collect();
    Patient {
        id: format!("HOSP-{:06}-{suffix}", 100_000 + i * 7 + rng.gen_range(0..7)),
        name: format!(
            "{}^{}",
            SURNAMES.choose(rng).expect("non-empty"),
            GIVEN_NAMES.choose(rng).expect("non-empty")
        ),
        birth_date: format!(
            "{}-{:02}-{:02}",
            rng.gen_range(1930..1975),
            rng.gen_range(1..=12),
            rng.gen_range(1..=28)
        ),
    }
}

fn study(rng: &mut ChaCha8Rng, i: usize, p: &Patient) -> (Container, StudyTruth) {
    let laterality = if rng.gen_bool(0.5) { "L" } else { "R" };
    let mut headers = Vec::new();
    let mut images = Vec::new();
    let mut truths = Vec::new();
    let mut annotations = Vec::new();
    for (index, view) in ["CC", "MLO"].into_iter().enumerate() {
        let calcs = *[0usize, 0, 1, 2, 3].choose(rng).expect("non-empty");
        let ph = phantom(rng, view, laterality, calcs, CalcAmplitude::Varied);
        let a = ph.truth.acquisition;
        headers.push(ImageHeader {
            view: view.into(),
            laterality: laterality.into(),
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
            bits: 16,
            spacing_mm: SPACING_MM,
            tube_kvp: a.tube_kvp,
            exposure_mas: a.exposure_mas,
            detector_gain: a.detector_gain,
            detector_offset: a.detector_offset,
        });
        if let Some(&(x, y)) = ph.truth.calcifications.first() {
            annotations.push(AnnotationHeader {
                image_index: index,
                annotator_role: "radiologist".into(),
                finding: "microcalc-cluster".into(),
                region_shape: "point".into(),
                region_coords: format!("{x} {y}"),
            });
        } else if rng.gen_bool(0.3) {
            annotations.push(AnnotationHeader {
                image_index: index,
                annotator_role: if rng.gen_bool(0.5) { "resident" } else { "cad" }.into(),
                finding: if rng.gen_bool(0.7) { "normal" } else { "benign" }.into(),
                region_shape: "circle".into(),
                region_coords: format!("{} {} {}", rng.gen_range(20..100), rng.gen_range(20..100), rng.gen_range(3..12)),
            });
        }
        images.push(ph.image);
        truths.push(ph.truth);
    }
    let study_id = format!("ST{:05}", i + 1);
    let header = ContainerHeader {
        patient_name: p.name.clone(),
        patient_id: p.id.clone(),
        birth_date: p.birth_date.clone(),
        study_date: format!(
            "{}-{:02}-{:02}",
            rng.gen_range(2001..2005),
            rng.gen_range(1..=12),
            rng.gen_range(1..=28)
        ),
        study_id: study_id.clone(),
        consent: Some("Y".into()),
        images: headers,
        annotations,
    };
    let truth = StudyTruth {
        file: format!("study-{:04}.mgc", i + 1),
        study_id,
        patient_id: p.id.clone(),
        patient_name: p.name.clone(),
        images: truths,
    };
    (Container { header, images }, truth)
}

fn acquisition(rng: &mut ChaCha8Rng) -> AcquisitionParams {
    AcquisitionParams {
        tube_kvp: rng.gen_range(24..=32) as f64,
        exposure_mas: rng.gen_range(60..=140) as f64,
        detector_gain: (rng.gen_range(0.7..1.5f64) * 100.0).round() / 100.0,
        detector_offset: rng.gen_range(40..=200) as f64,
    }
}

struct Shape {
    /// Chest wall on the left edge when true.
    wall_left: bool,
    a: f64,
    b: f64,
    cy: f64,
}

impl Shape {
    /// 0 on the skin line, 1 at the chest-wall center, negative outside.
    fn depth(&self, x: usize, y: usize) -> f64 {
        let dx = if self.wall_left { x as f64 } else { (IMAGE_SIZE - 1 - x) as f64 } / self.a;
        let dy = (y as f64 - self.cy) / self.b;
        1.0 - (dx * dx + dy * dy)
    }
}

/// Renders one view with `calcs` planted calcifications.
pub fn phantom(rng: &mut ChaCha8Rng, view: &str, laterality: &str, calcs: usize, amplitude: CalcAmplitude) -> Phantom {
    let n = IMAGE_SIZE;
    let size = n as f64;
    let shape = Shape {
        wall_left: laterality == "R",
        a: size * rng.gen_range(0.72..0.9),
        b: size * if view == "CC" { rng.gen_range(0.40..0.47) } else { rng.gen_range(0.44..0.49) },
        cy: size / 2.0 + rng.gen_range(-4.0..4.0),
    };

    // Dense region: a sum of broad blobs near the chest wall, thresholded
    // through a soft sigmoid.
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..5))
        .map(|_| {
            let depth = rng.gen_range(0.05..0.55) * shape.a;
            let x = if shape.wall_left { depth } else { size - 1.0 - depth };
            let y = shape.cy + rng.gen_range(-0.6..0.6) * shape.b;
            (x, y, rng.gen_range(14.0..28.0), rng.gen_range(0.6..1.0))
        })
        .collect();
    let level = rng.gen_range(0.35..0.65);
    let field = |x: usize, y: usize| -> f64 {
        let s: f64 = blobs
            .iter()
            .map(|&(bx, by, r, w)| {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                w * (-d2 / (2.0 * r * r)).exp()
            })
            .sum();
        s - level
    };

    let mut tissue = vec![0.0; n * n];
    let mut breast = 0usize;
    let mut dense = 0usize;
    for y in 0..n {
        for x in 0..n {
            let d = shape.depth(x, y);
            if d <= 0.0 {
                continue;
            }
            let f = field(x, y);
            breast += 1;
            if f > 0.0 {
                dense += 1;
            }
            let blend = 1.0 / (1.0 + (-f / 0.2).exp());
            let u = (d / SKIN_TAPER).min(1.0);
            let taper = 0.8 + 0.2 * u * u * (3.0 - 2.0 * u);
            tissue[y * n + x] = taper * (FAT_LEVEL + (DENSE_LEVEL - FAT_LEVEL) * blend);
        }
    }

    let acq = acquisition(rng);
    let scale = acq.detector_gain * acq.exposure_factor() / AcquisitionParams::REFERENCE.exposure_factor();

    let mut centers: Vec<(f64, f64)> = Vec::new();
    let mut snrs = Vec::new();
    let mut spots = vec![0.0; n * n];
    let mut attempts = 0;
    while centers.len() < calcs && attempts < 10_000 {
        attempts += 1;
        let x0 = rng.gen_range(CALC_MARGIN as usize..n - CALC_MARGIN as usize - 1);
        let y0 = rng.gen_range(CALC_MARGIN as usize..n - CALC_MARGIN as usize - 1);
        let (cx, cy) = (x0 as f64 + 0.5, y0 as f64 + 0.5);
        let inside = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)]
            .iter()
            .all(|&(x, y)| shape.depth(x, y) > 0.35);
        let apart = centers
            .iter()
            .all(|&(px, py)| (px - cx).hypot(py - cy) >= CALC_MARGIN);
        if !inside || !apart {
            continue;
        }
        let snr = match amplitude {
            CalcAmplitude::Varied => rng.gen_range(10.0..20.0),
            CalcAmplitude::Fixed(s) => s,
        };
        for (x, y) in [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)] {
            spots[y * n + x] = snr * NOISE_SIGMA;
        }
        centers.push((cx, cy));
        snrs.push(snr);
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let pixels: Vec<u16> = (0..n * n)
        .map(|i| {
            if tissue[i] == 0.0 {
                return 0;
            }
            let v = scale * tissue[i] + acq.detector_offset + spots[i] + noise.sample(rng);
            v.round().clamp(1.0, 65535.0) as u16
        })
        .collect();

    Phantom {
        image: ImageVolume::new(n, n, pixels, SPACING_MM).expect("phantom dimensions are valid"),
        tissue,
        truth: ImageTruth {
            view: view.into(),
            laterality: laterality.into(),
            dense_fraction: if breast == 0 { 0.0 } else { dense as f64 / breast as f64 },
            calcifications: centers,
            calc_snr: snrs,
            acquisition: acq,
        },
    }
}
