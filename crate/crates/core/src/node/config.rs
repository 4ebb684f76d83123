use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalogue::Durability;
use crate::{Error, Result};

pub const DEFAULT_PLACEMENT_THRESHOLD: u64 = 10 * 1024 * 1024;

/// Per-node TOML configuration. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: String,
    pub listen: String,
    pub data_dir: PathBuf,
    /// Address of the federation's catalogue service.
    pub catalogue: String,
    pub roster: PathBuf,
    /// Credentials file (`{node_id, secret}`) this node authenticates with.
    pub credentials: PathBuf,
    /// 64 hex characters; never sent over the wire.
    pub site_key: PathBuf,
    #[serde(default = "default_threshold")]
    pub placement_threshold_bytes: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub durability: DurabilitySetting,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurabilitySetting {
    /// fsync every acknowledged write.
    #[default]
    Sync,
    /// Flush to the OS only; survives process crashes, not power loss.
    Flush,
}

impl From<DurabilitySetting> for Durability {
    fn from(d: DurabilitySetting) -> Durability {
        match d {
            DurabilitySetting::Sync => Durability::Sync,
            DurabilitySetting::Flush => Durability::Flush,
        }
    }
}

fn default_threshold() -> u64 {
    DEFAULT_PLACEMENT_THRESHOLD
}

fn default_workers() -> usize {
    4
}

/// Configuration of the catalogue service process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogueConfig {
    pub listen: String,
    pub log: PathBuf,
    pub roster: PathBuf,
    #[serde(default)]
    pub durability: DurabilitySetting,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::malformed(format!("{}: {e}", path.display())))
}

impl NodeConfig {
    pub fn load(path: &Path) -> Result<NodeConfig> {
        let mut cfg: NodeConfig = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data_dir, &mut cfg.roster, &mut cfg.credentials, &mut cfg.site_key] {
            resolve(base, p);
        }
        if cfg.workers == 0 {
            return Err(Error::malformed("workers must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("node config serializes")
    }
}

impl CatalogueConfig {
    pub fn load(path: &Path) -> Result<CatalogueConfig> {
        let mut cfg: CatalogueConfig = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.log, &mut cfg.roster] {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("catalogue config serializes")
    }
}
