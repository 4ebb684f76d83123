//! The virtual file catalogue: logical file names resolved to physical
//! replicas held at grid-box nodes.

mod service;
mod store;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub use service::{
    CatMutation, CatMutationAck, CatalogueClient, CatalogueService, ListRequest, ResolveRequest,
};
pub use store::{Catalogue, Durability};

/// Federation-wide hierarchical name, e.g. `/node-A/P-0123abcd/ST-0001/img-L-CC.smi`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LogicalFileName(String);

impl LogicalFileName {
    pub fn new(path: impl Into<String>) -> Result<Self> {
        let path = path.into();
        validate_path(&path, false)?;
        Ok(LogicalFileName(path))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub(crate) fn is_component(c: &str) -> bool {
    !c.is_empty()
        && c
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

/// Validates an lfn (`allow_trailing_slash = false`) or a listing prefix.
fn validate_path(path: &str, allow_trailing_slash: bool) -> Result<()> {
    let Some(rest) = path.strip_prefix('/') else {
        return Err(Error::malformed(format!("`{path}` does not begin with `/`")));
    };
    if rest.is_empty() {
        return if allow_trailing_slash {
            Ok(())
        } else {
            Err(Error::malformed("logical file name has no components"))
        };
    }
    let rest = match rest.strip_suffix('/') {
        Some(r) if allow_trailing_slash => r,
        _ => rest,
    };
    for comp in rest.split('/') {
        if !is_component(comp) {
            return Err(Error::malformed(format!(
                "`{path}` has invalid component `{comp}`"
            )));
        }
    }
    Ok(())
}

pub fn validate_prefix(prefix: &str) -> Result<()> {
    validate_path(prefix, true)
}

impl TryFrom<String> for LogicalFileName {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        LogicalFileName::new(value)
    }
}

impl From<LogicalFileName> for String {
    fn from(lfn: LogicalFileName) -> String {
        lfn.0
    }
}

impl std::borrow::Borrow<str> for LogicalFileName {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl FromStr for LogicalFileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LogicalFileName::new(s)
    }
}

impl fmt::Display for LogicalFileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// SHA-256 of a file's bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Checksum([u8; 32]);

impl Checksum {
    pub fn of(bytes: &[u8]) -> Checksum {
        Checksum(Sha256::digest(bytes).into())
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Checksum {
        Checksum(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl FromStr for Checksum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let raw = hex::decode(s).map_err(|e| Error::malformed(format!("checksum: {e}")))?;
        let arr: [u8; 32] = raw
            .try_into()
            .map_err(|_| Error::malformed("checksum must be 32 bytes"))?;
        Ok(Checksum(arr))
    }
}

impl TryFrom<String> for Checksum {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<Checksum> for String {
    fn from(c: Checksum) -> String {
        c.to_hex()
    }
}

impl fmt::Display for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Checksum({})", &self.to_hex()[..12])
    }
}

/// One physical copy of a logical file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaEntry {
    pub lfn: LogicalFileName,
    pub node_id: String,
    /// Node-relative storage key.
    pub local_path: String,
    pub size_bytes: u64,
    pub checksum: Checksum,
    pub registered_at: DateTime<Utc>,
}

/// A page of names from [`CatalogueApi::list`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListPage {
    pub names: Vec<LogicalFileName>,
    /// Pass back as `after` to fetch the next page.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next: Option<String>,
}

/// Catalogue operations, served locally or over the wire.
pub trait CatalogueApi: Send + Sync {
    /// Adds a replica and returns every replica of the lfn afterwards.
    fn register(&self, replica: ReplicaEntry) -> Result<Vec<ReplicaEntry>>;
    /// Removes one replica and returns the remaining replica count.
    fn remove_replica(&self, lfn: &LogicalFileName, node_id: &str) -> Result<usize>;
    /// Live replicas ordered by node id.
    fn resolve(&self, lfn: &LogicalFileName) -> Result<Vec<ReplicaEntry>>;
    fn list(&self, prefix: &str, limit: usize, after: Option<&str>) -> Result<ListPage>;
}
