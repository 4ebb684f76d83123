//! `MGC1` study container: the DICOM-like file a site exports for ingest.
//!
//! Layout: the 4 magic bytes `MGC1`, a little-endian u32 header length, a
//! JSON header of that many bytes, then each image's pixels as row-major
//! little-endian u16 samples in header order. Nothing may follow the last
//! payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::imaging::{AcquisitionParams, ImageVolume};
use crate::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"MGC1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub patient_name: String,
    pub patient_id: String,
    /// `YYYY-MM-DD`.
    pub birth_date: String,
    pub study_date: String,
    pub study_id: String,
    /// `Y` when the patient consented; anything else refuses ingest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consent: Option<String>,
    pub images: Vec<ImageHeader>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub annotations: Vec<AnnotationHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageHeader {
    pub view: String,
    pub laterality: String,
    pub width: usize,
    pub height: usize,
    pub bits: u32,
    pub spacing_mm: f64,
    pub tube_kvp: f64,
    pub exposure_mas: f64,
    pub detector_gain: f64,
    pub detector_offset: f64,
}

impl ImageHeader {
    pub fn acquisition(&self) -> AcquisitionParams {
        AcquisitionParams {
            tube_kvp: self.tube_kvp,
            exposure_mas: self.exposure_mas,
            detector_gain: self.detector_gain,
            detector_offset: self.detector_offset,
        }
    }

    fn payload_len(&self) -> Result<usize> {
        self.width
            .checked_mul(self.height)
            .and_then(|n| n.checked_mul(2))
            .ok_or_else(|| Error::malformed("image dimensions overflow"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationHeader {
    /// Index into `images`.
    pub image_index: usize,
    pub annotator_role: String,
    pub finding: String,
    pub region_shape: String,
    pub region_coords: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub images: Vec<ImageVolume>,
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.header.images.len() != self.images.len() {
            return Err(Error::malformed("header and payload image counts differ"));
        }
        for (h, img) in self.header.images.iter().zip(&self.images) {
            if h.width != img.width() || h.height != img.height() {
                return Err(Error::malformed("header dimensions disagree with payload"));
            }
        }
        let header = serde_json::to_vec(&self.header)?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::malformed("container header too large"))?;
        let mut out = Vec::with_capacity(8 + header.len() + self.images.len() * 2);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for img in &self.images {
            out.extend_from_slice(&img.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Container> {
        if bytes.len() < 8 || &bytes[..4] != CONTAINER_MAGIC {
            return Err(Error::malformed("not an MGC1 container"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() < header_len {
            return Err(Error::malformed(format!(
                "container header declares {header_len} bytes, {} present",
                body.len()
            )));
        }
        let header: ContainerHeader = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::malformed(format!("container header: {e}")))?;
        if header.images.is_empty() {
            return Err(Error::malformed("container holds no images"));
        }
        let mut payload = &body[header_len..];
        let mut images = Vec::with_capacity(header.images.len());
        for (i, h) in header.images.iter().enumerate() {
            if h.bits != 16 {
                return Err(Error::malformed(format!("image {i}: {} bits per sample, expected 16", h.bits)));
            }
            let len = h.payload_len()?;
            if payload.len() < len {
                return Err(Error::malformed(format!("image {i}: payload truncated")));
            }
            let (pixels, rest) = payload.split_at(len);
            images.push(ImageVolume::from_le_bytes(h.width, h.height, pixels, h.spacing_mm)?);
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(Error::malformed(format!("{} trailing bytes after payloads", payload.len())));
        }
        Ok(Container { header, images })
    }

    pub fn read(path: &Path) -> Result<Container> {
        Container::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }
}
