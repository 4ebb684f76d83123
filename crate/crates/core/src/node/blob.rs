//! Stored image format and the content-addressed blob store.
//!
//! A blob is the 4 magic bytes `SMI1`, a little-endian u32 header length, a
//! JSON [`BlobHeader`], then the row-major little-endian u16 pixels. Its
//! storage key and catalogue checksum are the SHA-256 of the whole blob.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalogue::Checksum;
use crate::imaging::{AcquisitionParams, ImageVolume};
use crate::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"SMI1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobHeader {
    pub width: usize,
    pub height: usize,
    pub spacing_mm: f64,
    pub view: String,
    pub laterality: String,
    pub acquisition: AcquisitionParams,
}

pub fn encode_blob(header: &BlobHeader, img: &ImageVolume) -> Result<Vec<u8>> {
    if header.width != img.width() || header.height != img.height() {
        return Err(Error::malformed("blob header dimensions disagree with image"));
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + json.len() + img.pixels().len() * 2);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&img.to_le_bytes());
    Ok(out)
}

pub fn decode_blob(bytes: &[u8]) -> Result<(BlobHeader, ImageVolume)> {
    if bytes.len() < 8 || &bytes[..4] != BLOB_MAGIC {
        return Err(Error::malformed("not an SMI1 image blob"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let rest = &bytes[8..];
    if rest.len() < len {
        return Err(Error::malformed("blob header truncated"));
    }
    let header: BlobHeader = serde_json::from_slice(&rest[..len])?;
    let img = ImageVolume::from_le_bytes(header.width, header.height, &rest[len..], header.spacing_mm)?;
    Ok((header, img))
}

/// Blobs under `<root>/<first two hex digits>/<full hex checksum>`.
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn open(root: impl AsRef<Path>) -> Result<BlobStore> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("staging"))?;
        Ok(BlobStore { root })
    }

    /// Storage key of `checksum`, relative to the store root.
    pub fn key(checksum: &Checksum) -> String {
        let hex = checksum.to_hex();
        format!("{}/{hex}", &hex[..2])
    }

    fn path(&self, checksum: &Checksum) -> PathBuf {
        self.root.join(Self::key(checksum))
    }

    pub fn contains(&self, checksum: &Checksum) -> bool {
        self.path(checksum).is_file()
    }

    /// Writes `bytes` durably: staged, synced, then renamed into place.
    /// Returns the checksum and whether the blob was newly created.
    pub fn put(&self, bytes: &[u8]) -> Result<(Checksum, bool)> {
        let checksum = Checksum::of(bytes);
        let dest = self.path(&checksum);
        if dest.is_file() {
            return Ok((checksum, false));
        }
        let staging = tempfile::NamedTempFile::new_in(self.root.join("staging"))?;
        {
            let mut f: &File = staging.as_file();
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::create_dir_all(dest.parent().expect("blob paths have a parent"))?;
        staging.persist(&dest).map_err(|e| Error::Io(e.error))?;
        Ok((checksum, true))
    }

    /// Reads a blob and checks that it still hashes to its key.
    pub fn get(&self, checksum: &Checksum) -> Result<Vec<u8>> {
        let bytes = match fs::read(self.path(checksum)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::not_found(format!("no local blob {}", checksum.to_hex())))
            }
            Err(e) => return Err(e.into()),
        };
        let actual = Checksum::of(&bytes);
        if &actual != checksum {
            return Err(Error::Integrity(format!(
                "blob {} hashes to {}",
                checksum.to_hex(),
                actual.to_hex()
            )));
        }
        Ok(bytes)
    }

    pub fn remove(&self, checksum: &Checksum) -> Result<()> {
        match fs::remove_file(self.path(checksum)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    /// Every stored checksum, for integrity audits.
    pub fn list(&self) -> Result<Vec<Checksum>> {
        let mut out = Vec::new();
        for shard in fs::read_dir(&self.root)? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() || shard.file_name() == "staging" {
                continue;
            }
            for entry in fs::read_dir(shard.path())? {
                if let Some(sum) = entry?.file_name().to_str().and_then(|n| n.parse().ok()) {
                    out.push(sum);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}
