//! Mammogram analysis on 16-bit pixel grids: acquisition standardization,
//! quality-control statistics, breast density and micro-calcification
//! detection. Every operation is a pure function of its inputs.

mod density;
mod median;
mod microcalc;
mod qc;
mod standardize;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use density::{breast_density, DensityResult};
pub use median::median_filter;
pub use microcalc::{detect_microcalcs, DetectorParams, Location, MicrocalcResult};
pub use qc::{qc_metrics, QcReport};
pub use standardize::standardize;

pub const MIN_DIMENSION: usize = 16;

/// Row-major 16-bit image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    width: usize,
    height: usize,
    pixels: Vec<u16>,
    spacing_mm: f64,
}

impl ImageVolume {
    pub fn new(width: usize, height: usize, pixels: Vec<u16>, spacing_mm: f64) -> Result<Self> {
        if width < MIN_DIMENSION || height < MIN_DIMENSION {
            return Err(Error::malformed(format!(
                "image {width}x{height} is smaller than {MIN_DIMENSION}x{MIN_DIMENSION}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::malformed(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
            return Err(Error::malformed("pixel spacing must be positive"));
        }
        Ok(ImageVolume {
            width,
            height,
            pixels,
            spacing_mm,
        })
    }

    /// Decodes little-endian 16-bit samples.
    pub fn from_le_bytes(width: usize, height: usize, bytes: &[u8], spacing_mm: f64) -> Result<Self> {
        if bytes.len() != width * height * 2 {
            return Err(Error::malformed(format!(
                "{} payload bytes for a {width}x{height} 16-bit image",
                bytes.len()
            )));
        }
        let pixels = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        ImageVolume::new(width, height, pixels, spacing_mm)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.to_le_bytes()).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    pub(crate) fn with_pixels(&self, pixels: Vec<u16>) -> ImageVolume {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        ImageVolume {
            pixels,
            ..self.clone()
        }
    }
}

/// Acquisition operating point of one exposure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub tube_kvp: f64,
    pub exposure_mas: f64,
    /// Detector gain `g`, dimensionless.
    pub detector_gain: f64,
    /// Detector offset `b`, in counts.
    pub detector_offset: f64,
}

impl AcquisitionParams {
    /// Reference operating point used when a job names none.
    pub const REFERENCE: AcquisitionParams = AcquisitionParams {
        tube_kvp: 28.0,
        exposure_mas: 100.0,
        detector_gain: 1.0,
        detector_offset: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.tube_kvp) || !positive(self.exposure_mas) {
            return Err(Error::malformed("tube kVp and exposure mAs must be positive"));
        }
        if !positive(self.detector_gain) {
            return Err(Error::malformed("detector gain must be positive"));
        }
        if !self.detector_offset.is_finite() {
            return Err(Error::malformed("detector offset must be finite"));
        }
        Ok(())
    }

    /// Product `kVp · mAs`, the exposure factor standardization divides out.
    pub fn exposure_factor(&self) -> f64 {
        self.tube_kvp * self.exposure_mas
    }
}
