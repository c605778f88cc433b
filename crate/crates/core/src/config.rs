//! Per-server configuration.
//!
//! Files are TOML. `protocol_properties` is a free-form string to
//! string-list table read by protocol constructors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::node::{ClusterShape, NodeId, TreeShape};

pub const DEFAULT_RESEND_INTERVAL_MS: u64 = 500;
pub const DEFAULT_QUEUE_CAPACITY: usize = 10_000;
pub const DEFAULT_CLIENT_TIMEOUT_MS: u64 = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("missing protocol property {0:?}")]
    MissingProperty(String),
    #[error("protocol property {name:?}: cannot parse {value:?}")]
    BadProperty { name: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Versioning {
    Single,
    #[default]
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicationMode {
    #[default]
    ServerCentric,
    StorageCentric,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageSettings {
    pub versioning: Versioning,
    pub replication: ReplicationMode,
    /// Append-only log; in-memory only when absent.
    pub log_path: Option<PathBuf>,
    pub flush_on_insert: bool,
    /// Replication ring for storage-centric mode, in ring order. Empty means
    /// the nodes holding the same partition, ordered by replica.
    pub ring: Vec<NodeId>,
}

/// String to string-list table, as carried in config files.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProtocolProperties(pub BTreeMap<String, Vec<String>>);

impl ProtocolProperties {
    pub fn set(&mut self, name: &str, values: impl IntoIterator<Item = impl ToString>) {
        self.0.insert(name.to_string(), values.into_iter().map(|v| v.to_string()).collect());
    }

    pub fn get(&self, name: &str) -> Option<&[String]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn first<T: std::str::FromStr>(&self, name: &str) -> Result<T, ConfigError> {
        let value = self
            .get(name)
            .and_then(|v| v.first())
            .ok_or_else(|| ConfigError::MissingProperty(name.to_string()))?;
        value
            .parse()
            .map_err(|_| ConfigError::BadProperty { name: name.to_string(), value: value.clone() })
    }

    pub fn first_or<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T, ConfigError> {
        match self.get(name).and_then(|v| v.first()) {
            None => Ok(default),
            Some(_) => self.first(name),
        }
    }

    /// Every value of `name`; empty when absent.
    pub fn list<T: std::str::FromStr>(&self, name: &str) -> Result<Vec<T>, ConfigError> {
        self.get(name)
            .unwrap_or(&[])
            .iter()
            .map(|v| {
                v.parse()
                    .map_err(|_| ConfigError::BadProperty { name: name.to_string(), value: v.clone() })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub node: NodeId,
    #[serde(default = "default_host")]
    pub host: String,
    pub client_port: u16,
    pub server_port: u16,
    /// Peer server-port addresses.
    #[serde(default)]
    pub peers: BTreeMap<NodeId, String>,
    #[serde(default)]
    pub protocol_properties: ProtocolProperties,
    #[serde(default)]
    pub storage: StorageSettings,
    #[serde(default = "default_resend")]
    pub resend_interval_ms: u64,
    #[serde(default = "default_capacity")]
    pub queue_capacity: usize,
}

fn default_host() -> String {
    "127.0.0.1".to_string()
}
fn default_resend() -> u64 {
    DEFAULT_RESEND_INTERVAL_MS
}
fn default_capacity() -> usize {
    DEFAULT_QUEUE_CAPACITY
}

impl ServerConfig {
    /// Config for `node` in a full-replication cluster, without addresses.
    /// Used by the simulator and by descriptor expansion.
    pub fn for_cluster(node: NodeId, shape: ClusterShape, tree: TreeShape) -> Self {
        let mut props = ProtocolProperties::default();
        props.set("dc_id", [node.replica]);
        props.set("p_id", [node.partition]);
        props.set("parent_p_id", [tree.parent(node.partition)]);
        props.set("children_p_ids", tree.children(node.partition, shape.partitions));
        props.set("num_of_datacenters", [shape.replicas]);
        props.set("num_of_partitions", [shape.partitions]);
        ServerConfig {
            node,
            host: default_host(),
            client_port: 0,
            server_port: 0,
            peers: shape.nodes().filter(|n| *n != node).map(|n| (n, String::new())).collect(),
            protocol_properties: props,
            storage: StorageSettings::default(),
            resend_interval_ms: DEFAULT_RESEND_INTERVAL_MS,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let cfg: ServerConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Cluster shape implied by the standard properties.
    pub fn shape(&self) -> Result<ClusterShape, ConfigError> {
        Ok(ClusterShape::new(
            self.protocol_properties.first("num_of_datacenters")?,
            self.protocol_properties.first("num_of_partitions")?,
        ))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.queue_capacity == 0 {
            return Err(ConfigError::Invalid("queue_capacity must be positive".into()));
        }
        if self.resend_interval_ms == 0 {
            return Err(ConfigError::Invalid("resend_interval_ms must be positive".into()));
        }
        if self.peers.contains_key(&self.node) {
            return Err(ConfigError::Invalid(format!("node {} lists itself as a peer", self.node)));
        }
        if let Ok(shape) = self.shape() {
            if !shape.contains(self.node) {
                return Err(ConfigError::Invalid(format!("node {} outside cluster shape", self.node)));
            }
            if let Some(bad) = self.peers.keys().find(|p| !shape.contains(**p)) {
                return Err(ConfigError::Invalid(format!("peer {bad} outside cluster shape")));
            }
        }
        Ok(())
    }

    /// Ring successors used by storage-centric replication: the next two
    /// distinct nodes after this one.
    pub fn ring_successors(&self) -> Vec<NodeId> {
        let ring: Vec<NodeId> = if self.storage.ring.is_empty() {
            match self.shape() {
                Ok(shape) => (0..shape.replicas).map(|r| NodeId::new(r, self.node.partition)).collect(),
                Err(_) => Vec::new(),
            }
        } else {
            self.storage.ring.clone()
        };
        let Some(pos) = ring.iter().position(|n| *n == self.node) else { return Vec::new() };
        (1..ring.len()).map(|i| ring[(pos + i) % ring.len()]).take(2).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn properties_mirror_tree_and_shape() {
        let cfg = ServerConfig::for_cluster(NodeId::new(1, 0), ClusterShape::new(2, 3), TreeShape::Star);
        let p = &cfg.protocol_properties;
        assert_eq!(p.first::<u32>("dc_id").unwrap(), 1);
        assert_eq!(p.first::<u32>("parent_p_id").unwrap(), 0);
        assert_eq!(p.list::<u32>("children_p_ids").unwrap(), vec![1, 2]);
        assert_eq!(cfg.peers.len(), 5);
        assert_eq!(cfg.shape().unwrap(), ClusterShape::new(2, 3));
        assert!(matches!(p.first::<u32>("heartbeat_interval"), Err(ConfigError::MissingProperty(_))));
        assert_eq!(p.first_or::<u64>("heartbeat_interval", 10).unwrap(), 10);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ServerConfig::for_cluster(NodeId::new(0, 1), ClusterShape::new(2, 2), TreeShape::Chain);
        cfg.storage.replication = ReplicationMode::StorageCentric;
        cfg.peers.insert(NodeId::new(1, 1), "10.0.0.2:7001".into());
        let back: ServerConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = ServerConfig::for_cluster(NodeId::new(0, 0), ClusterShape::new(1, 1), TreeShape::Star);
        cfg.validate().unwrap();
        cfg.queue_capacity = 0;
        assert!(cfg.validate().is_err());
        cfg.queue_capacity = 1;
        cfg.peers.insert(NodeId::new(3, 0), String::new());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ring_successors_wrap() {
        let cfg = ServerConfig::for_cluster(NodeId::new(2, 0), ClusterShape::new(4, 1), TreeShape::Star);
        assert_eq!(cfg.ring_successors(), vec![NodeId::new(3, 0), NodeId::new(0, 0)]);
        let cfg = ServerConfig::for_cluster(NodeId::new(0, 0), ClusterShape::new(2, 1), TreeShape::Star);
        assert_eq!(cfg.ring_successors(), vec![NodeId::new(1, 0)]);
    }
}
