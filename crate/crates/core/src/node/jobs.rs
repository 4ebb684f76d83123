//! The closed set of analysis algorithms a node will run, and the job
//! vocabulary shared by nodes and the mediator.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::blob::decode_blob;
use crate::catalogue::{Checksum, LogicalFileName};
use crate::imaging::{self, AcquisitionParams, DetectorParams};
use crate::mediator::PlacementDecision;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    QcMetrics,
    BreastDensity,
    DetectMicrocalcs,
    Standardize,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::QcMetrics,
        Algorithm::BreastDensity,
        Algorithm::DetectMicrocalcs,
        Algorithm::Standardize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::QcMetrics => "qc_metrics",
            Algorithm::BreastDensity => "breast_density",
            Algorithm::DetectMicrocalcs => "detect_microcalcs",
            Algorithm::Standardize => "standardize",
        }
    }

    pub fn from_name(name: &str) -> Result<Algorithm> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::UnknownAlgorithm(name.to_owned()))
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    /// Federation-unique; assigned by the node that accepts the job when
    /// left empty.
    #[serde(default)]
    pub job_id: String,
    pub algorithm: String,
    pub inputs: Vec<LogicalFileName>,
    #[serde(default)]
    pub requester: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl JobSpec {
    pub fn new(algorithm: impl Into<String>, inputs: Vec<LogicalFileName>) -> JobSpec {
        JobSpec {
            job_id: String::new(),
            algorithm: algorithm.into(),
            inputs,
            requester: String::new(),
            params: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    /// The algorithm rejected this image (e.g. a degenerate histogram).
    Failed,
    /// Fetched bytes did not hash to the catalogued checksum.
    IntegrityError,
    /// The node holding the input did not answer.
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEntry {
    pub lfn: LogicalFileName,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    /// Node whose CPU produced the output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed_at: Option<String>,
}

impl JobEntry {
    pub fn ok(lfn: LogicalFileName, output: Value, node: &str) -> JobEntry {
        JobEntry {
            lfn,
            outcome: Outcome::Ok,
            output: Some(output),
            detail: None,
            executed_at: Some(node.to_owned()),
        }
    }

    pub fn failed(lfn: LogicalFileName, outcome: Outcome, detail: impl Into<String>) -> JobEntry {
        JobEntry {
            lfn,
            outcome,
            output: None,
            detail: Some(detail.into()),
            executed_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub job_id: String,
    pub algorithm: String,
    /// One entry per distinct input, sorted by lfn.
    pub entries: Vec<JobEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<PlacementDecision>,
    #[serde(default)]
    pub unreachable: Vec<String>,
}

impl JobResult {
    pub fn entry(&self, lfn: &LogicalFileName) -> Option<&JobEntry> {
        self.entries.iter().find(|e| &e.lfn == lfn)
    }

    pub fn is_partial(&self) -> bool {
        !self.unreachable.is_empty()
    }
}

/// A validated algorithm plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Invocation {
    QcMetrics,
    BreastDensity,
    DetectMicrocalcs(DetectorParams),
    Standardize(AcquisitionParams),
}

impl Invocation {
    /// Validates the algorithm name and parameters of `spec`.
    pub fn from_spec(spec: &JobSpec) -> Result<Invocation> {
        let algorithm = Algorithm::from_name(&spec.algorithm)?;
        let allowed: &[&str] = match algorithm {
            Algorithm::QcMetrics | Algorithm::BreastDensity => &[],
            Algorithm::DetectMicrocalcs => &["min_snr", "window"],
            Algorithm::Standardize => &["tube_kvp", "exposure_mas", "detector_gain", "detector_offset"],
        };
        if let Some(extra) = spec.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::malformed(format!("{algorithm} takes no parameter `{extra}`")));
        }
        let real = |name: &str, default: f64| -> Result<f64> {
            match spec.params.get(name) {
                None => Ok(default),
                Some(v) => v
                    .as_f64()
                    .ok_or_else(|| Error::malformed(format!("parameter `{name}` must be a number"))),
            }
        };
        Ok(match algorithm {
            Algorithm::QcMetrics => Invocation::QcMetrics,
            Algorithm::BreastDensity => Invocation::BreastDensity,
            Algorithm::DetectMicrocalcs => {
                let defaults = DetectorParams::default();
                let window = match spec.params.get("window") {
                    None => defaults.window,
                    Some(v) => v
                        .as_u64()
                        .map(|w| w as usize)
                        .ok_or_else(|| Error::malformed("parameter `window` must be a positive integer"))?,
                };
                let params = DetectorParams {
                    min_snr: real("min_snr", defaults.min_snr)?,
                    window,
                };
                if window < 3 || window % 2 == 0 || !(params.min_snr > 0.0 && params.min_snr.is_finite()) {
                    return Err(Error::malformed("window must be odd and >= 3, min_snr positive"));
                }
                Invocation::DetectMicrocalcs(params)
            }
            Algorithm::Standardize => {
                let r = AcquisitionParams::REFERENCE;
                let reference = AcquisitionParams {
                    tube_kvp: real("tube_kvp", r.tube_kvp)?,
                    exposure_mas: real("exposure_mas", r.exposure_mas)?,
                    detector_gain: real("detector_gain", r.detector_gain)?,
                    detector_offset: real("detector_offset", r.detector_offset)?,
                };
                reference.validate()?;
                Invocation::Standardize(reference)
            }
        })
    }

    /// Runs the algorithm on one stored image blob.
    pub fn run(&self, blob: &[u8]) -> Result<Value> {
        let (header, img) = decode_blob(blob)?;
        Ok(match self {
            Invocation::QcMetrics => serde_json::to_value(imaging::qc_metrics(&img))?,
            Invocation::BreastDensity => serde_json::to_value(imaging::breast_density(&img)?)?,
            Invocation::DetectMicrocalcs(p) => {
                serde_json::to_value(imaging::detect_microcalcs(&img, p.min_snr, p.window)?)?
            }
            Invocation::Standardize(reference) => {
                let out = imaging::standardize(&img, &header.acquisition, reference)?;
                let qc = imaging::qc_metrics(&out);
                json!({
                    "width": out.width(),
                    "height": out.height(),
                    "pixel_checksum": Checksum::of(&out.to_le_bytes()).to_hex(),
                    "mean_brightness": qc.mean_brightness,
                    "contrast": qc.contrast,
                })
            }
        })
    }

    /// Runs on one input and folds algorithm failures into the entry.
    pub fn run_entry(&self, lfn: &LogicalFileName, blob: &[u8], node: &str) -> JobEntry {
        match self.run(blob) {
            Ok(output) => JobEntry::ok(lfn.clone(), output, node),
            Err(e) => JobEntry::failed(lfn.clone(), Outcome::Failed, e.to_string()),
        }
    }
}
