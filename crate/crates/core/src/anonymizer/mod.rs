//! De-identification applied before anything about a study is persisted:
//! keyed-hash pseudonyms, identifier stripping, and the site-local
//! encrypted re-identification map.

mod reid;

use std::fmt;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::node::container::{AnnotationHeader, ContainerHeader, ImageHeader};
use crate::{Error, Result};

pub use reid::{ReidEntry, ReidMap};

type HmacSha256 = Hmac<Sha256>;

/// Secret held by one site. Never leaves the node's data directory.
#[derive(Clone, PartialEq, Eq)]
pub struct SiteKey([u8; 32]);

impl SiteKey {
    pub fn from_bytes(bytes: [u8; 32]) -> SiteKey {
        SiteKey(bytes)
    }

    pub fn generate() -> SiteKey {
        let mut bytes = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut bytes);
        SiteKey(bytes)
    }

    /// Reads a key file holding 64 hex characters.
    pub fn load(path: &Path) -> Result<SiteKey> {
        let text = fs::read_to_string(path)?;
        let bytes = hex::decode(text.trim())
            .map_err(|e| Error::malformed(format!("site key {}: {e}", path.display())))?;
        let bytes: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::malformed(format!("site key {} is not 32 bytes", path.display())))?;
        Ok(SiteKey(bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, hex::encode(self.0))?;
        Ok(())
    }

    fn mac(&self, data: &[u8]) -> [u8; 32] {
        let mut mac = HmacSha256::new_from_slice(&self.0).expect("HMAC accepts any key length");
        mac.update(data);
        mac.finalize().into_bytes().into()
    }
}

impl fmt::Debug for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SiteKey(..)")
    }
}

/// `P-` followed by 16 lowercase hex characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pseudonym(String);

impl Pseudonym {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Deterministic per-site pseudonym: the first 64 bits of
/// HMAC-SHA256(site_key, patient_id), hex encoded.
pub fn pseudonymize(patient_id: &str, key: &SiteKey) -> Result<Pseudonym> {
    if patient_id.is_empty() {
        return Err(Error::malformed("empty patient id"));
    }
    let mac = key.mac(patient_id.as_bytes());
    Ok(Pseudonym(format!("P-{}", hex::encode(&mac[..8]))))
}

/// Direct identifiers lifted out of a container header. Only ever written
/// to the [`ReidMap`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identifiers {
    pub patient_name: String,
    pub patient_id: String,
    pub birth_date: String,
}

/// A container header with direct identifiers removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanitizedHeader {
    pub pseudonym: Pseudonym,
    pub birth_year: i32,
    pub study_date: String,
    pub study_id: String,
    pub images: Vec<ImageHeader>,
    pub annotations: Vec<AnnotationHeader>,
}

/// Splits a header into its sanitized form and the identifiers it carried.
/// The name is dropped, the id replaced by its pseudonym and the birth date
/// coarsened to a year.
pub fn strip_identifiers(
    header: ContainerHeader,
    key: &SiteKey,
) -> Result<(SanitizedHeader, Identifiers)> {
    if header.consent.as_deref() != Some("Y") {
        return Err(Error::ConsentMissing);
    }
    let birth = NaiveDate::parse_from_str(&header.birth_date, "%Y-%m-%d")
        .map_err(|e| Error::malformed(format!("birth_date: {e}")))?;
    let pseudonym = pseudonymize(&header.patient_id, key)?;
    let ids = Identifiers {
        patient_name: header.patient_name,
        patient_id: header.patient_id,
        birth_date: header.birth_date,
    };
    let sanitized = SanitizedHeader {
        pseudonym,
        birth_year: birth.year(),
        study_date: header.study_date,
        study_id: header.study_id,
        images: header.images,
        annotations: header.annotations,
    };
    Ok((sanitized, ids))
}
