//! Site-local re-identification map, encrypted at rest.
//!
//! One line per upsert: base64 of a 12-byte nonce followed by the
//! ChaCha20-Poly1305 ciphertext of a JSON [`ReidEntry`]. The AEAD key is
//! derived from the site key, so the file is useless without it. Later
//! lines supersede earlier ones for the same pseudonym.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{Identifiers, Pseudonym, SiteKey};
use crate::{Error, Result};

const NONCE_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReidEntry {
    pub pseudonym: Pseudonym,
    #[serde(flatten)]
    pub identifiers: Identifiers,
}

pub struct ReidMap {
    path: Option<PathBuf>,
    cipher: ChaCha20Poly1305,
    entries: BTreeMap<Pseudonym, Identifiers>,
}

impl ReidMap {
    pub fn in_memory(key: &SiteKey) -> ReidMap {
        ReidMap {
            path: None,
            cipher: cipher_for(key),
            entries: BTreeMap::new(),
        }
    }

    /// Opens (creating the parent directory) and decrypts the map at `path`.
    pub fn open(path: impl AsRef<Path>, key: &SiteKey) -> Result<ReidMap> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut map = ReidMap::in_memory(key);
        if path.exists() {
            for (lineno, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let entry = map.decrypt(&line).map_err(|e| {
                    Error::Integrity(format!("{}:{}: {e}", path.display(), lineno + 1))
                })?;
                map.entries.insert(entry.pseudonym, entry.identifiers);
            }
        }
        map.path = Some(path);
        Ok(map)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Records the identifiers behind `pseudonym`; a no-op when unchanged.
    pub fn upsert(&mut self, pseudonym: &Pseudonym, ids: &Identifiers) -> Result<()> {
        if self.entries.get(pseudonym) == Some(ids) {
            return Ok(());
        }
        if let Some(path) = &self.path {
            let entry = ReidEntry {
                pseudonym: pseudonym.clone(),
                identifiers: ids.clone(),
            };
            let mut line = self.encrypt(&entry)?;
            line.push('\n');
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        self.entries.insert(pseudonym.clone(), ids.clone());
        Ok(())
    }

    pub fn lookup(&self, pseudonym: &Pseudonym) -> Option<&Identifiers> {
        self.entries.get(pseudonym)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn encrypt(&self, entry: &ReidEntry) -> Result<String> {
        let mut nonce = [0u8; NONCE_LEN];
        rand::rngs::OsRng.fill_bytes(&mut nonce);
        let plain = serde_json::to_vec(entry)?;
        let sealed = self
            .cipher
            .encrypt(Nonce::from_slice(&nonce), plain.as_slice())
            .map_err(|_| Error::internal("re-identification map encryption failed"))?;
        let mut raw = nonce.to_vec();
        raw.extend_from_slice(&sealed);
        Ok(BASE64.encode(raw))
    }

    fn decrypt(&self, line: &str) -> std::result::Result<ReidEntry, String> {
        let raw = BASE64.decode(line.trim()).map_err(|e| e.to_string())?;
        if raw.len() < NONCE_LEN {
            return Err("line too short".into());
        }
        let (nonce, sealed) = raw.split_at(NONCE_LEN);
        let plain = self
            .cipher
            .decrypt(Nonce::from_slice(nonce), sealed)
            .map_err(|_| "authentication failed (wrong site key or tampered line)".to_string())?;
        serde_json::from_slice(&plain).map_err(|e| e.to_string())
    }
}

fn cipher_for(key: &SiteKey) -> ChaCha20Poly1305 {
    let derived = key.mac(b"reid-map");
    ChaCha20Poly1305::new(Key::from_slice(&derived))
}
