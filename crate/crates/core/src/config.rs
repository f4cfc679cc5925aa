//! Node configuration file (JSON).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::ids::NodeId;

/// Environment variable that may name the config file.
pub const CONFIG_ENV: &str = "DIMS_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timeouts {
    pub handshake_ms: u64,
    pub ping_interval_ms: u64,
    pub pong_deadline_ms: u64,
    pub missed_pings: u32,
    pub search_ms: u64,
    pub fetch_ms: u64,
    pub push_ms: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            handshake_ms: 5_000,
            ping_interval_ms: 10_000,
            pong_deadline_ms: 5_000,
            missed_pings: 3,
            search_ms: 2_000,
            fetch_ms: 10_000,
            push_ms: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerConfig {
    pub node_id: NodeId,
    pub address: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorConfig {
    pub name: String,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: NodeId,
    pub client_listen: String,
    pub federation_listen: String,
    #[serde(default)]
    pub peers: Vec<PeerConfig>,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub timeouts: Timeouts,
    #[serde(default)]
    pub actors: Vec<ActorConfig>,
}

impl NodeConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for peer in &self.peers {
            if peer.node_id == self.node_id {
                return Err("peers: contains own node_id".into());
            }
            if !seen.insert(&peer.node_id) {
                return Err(format!("peers: duplicate node_id {}", peer.node_id));
            }
        }
        let mut names = BTreeSet::new();
        let mut tokens = BTreeSet::new();
        for actor in &self.actors {
            if actor.name.is_empty() || actor.token.is_empty() {
                return Err("actors: name and token must be non-empty".into());
            }
            if !names.insert(&actor.name) || !tokens.insert(&actor.token) {
                return Err("actors: duplicate name or token".into());
            }
        }
        for (field, addr) in [("client_listen", &self.client_listen), ("federation_listen", &self.federation_listen)] {
            if addr.rsplit_once(':').and_then(|(_, p)| p.parse::<u16>().ok()).is_none() {
                return Err(format!("{field}: expected host:port"));
            }
        }
        Ok(())
    }

    pub fn actor_for_token(&self, token: &str) -> Option<&str> {
        self.actors
            .iter()
            .find(|a| a.token == token)
            .map(|a| a.name.as_str())
    }
}

pub fn parse_config(text: &str, path: &str) -> Result<NodeConfig, Error> {
    let config: NodeConfig = serde_json::from_str(text).map_err(|e| Error::ConfigInvalid {
        path: path.to_string(),
        message: e.to_string(),
    })?;
    config.validate().map_err(|message| Error::ConfigInvalid {
        path: path.to_string(),
        message,
    })?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<NodeConfig, Error> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::ConfigNotFound(shown.clone()),
        _ => Error::Io(e.to_string()),
    })?;
    parse_config(&text, &shown)
}
