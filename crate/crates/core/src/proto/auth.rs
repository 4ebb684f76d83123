use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Credential presented in the first frame of every connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthToken {
    pub node_id: String,
    /// Hex-encoded SHA-256 of the member's shared secret.
    pub secret_digest: String,
    pub issued_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// A grid-box serving a hospital site.
    Node,
    /// A clinician or operator client.
    Client,
    /// May register replicas on behalf of any node.
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub node_id: String,
    pub secret_digest: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
}

/// The federation roster: every member allowed to open a session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    pub members: Vec<RosterEntry>,
}

impl Roster {
    pub fn load(path: &Path) -> Result<Roster> {
        let text = fs::read_to_string(path)?;
        let roster: Roster = serde_json::from_str(&text)?;
        let mut seen = std::collections::BTreeSet::new();
        for m in &roster.members {
            if !seen.insert(m.node_id.as_str()) {
                return Err(Error::malformed(format!(
                    "duplicate roster member `{}`",
                    m.node_id
                )));
            }
        }
        Ok(roster)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn get(&self, node_id: &str) -> Option<&RosterEntry> {
        self.members.iter().find(|m| m.node_id == node_id)
    }

    /// Grid-box members with a reachable address, keyed by node id.
    pub fn nodes(&self) -> BTreeMap<String, String> {
        self.members
            .iter()
            .filter(|m| m.role == Role::Node)
            .filter_map(|m| m.address.clone().map(|a| (m.node_id.clone(), a)))
            .collect()
    }
}

/// A member's own identity: node id plus the plaintext shared secret.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub node_id: String,
    pub secret: String,
}

impl Credentials {
    pub fn new(node_id: impl Into<String>, secret: impl Into<String>) -> Self {
        Credentials {
            node_id: node_id.into(),
            secret: secret.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Credentials> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn digest(&self) -> String {
        secret_digest(&self.secret)
    }

    pub fn token(&self) -> AuthToken {
        AuthToken {
            node_id: self.node_id.clone(),
            secret_digest: self.digest(),
            issued_at: Utc::now(),
        }
    }

    pub fn roster_entry(&self, role: Role, address: Option<String>) -> RosterEntry {
        RosterEntry {
            node_id: self.node_id.clone(),
            secret_digest: self.digest(),
            role,
            address,
        }
    }
}

pub fn secret_digest(secret: &str) -> String {
    hex::encode(Sha256::digest(secret.as_bytes()))
}

/// An authenticated session. Every frame after `AUTH` is attributed to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub node_id: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthOk {
    pub node_id: String,
    pub role: Role,
}

pub fn authenticate(token: &AuthToken, roster: &Roster) -> Result<Session> {
    let entry = roster
        .get(&token.node_id)
        .ok_or_else(|| Error::UnknownNode(token.node_id.clone()))?;
    if !constant_time_eq(
        entry.secret_digest.to_ascii_lowercase().as_bytes(),
        token.secret_digest.to_ascii_lowercase().as_bytes(),
    ) {
        return Err(Error::BadSecret(token.node_id.clone()));
    }
    Ok(Session {
        node_id: entry.node_id.clone(),
        role: entry.role,
    })
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
