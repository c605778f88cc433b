//! Cluster and experiment descriptors.
//!
//! Both are TOML. A cluster descriptor lists the servers of an `R x P`
//! full-replication cluster and the links between them; an experiment
//! descriptor lists client machines, workloads, repetitions and the
//! aggregation queries applied to the collected reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{
    ProtocolProperties, ServerConfig, StorageSettings, DEFAULT_QUEUE_CAPACITY, DEFAULT_RESEND_INTERVAL_MS,
};
use crate::node::{ClusterShape, NodeId, TreeShape};
use crate::protocols::ProtocolKind;
use crate::sim::{Delay, ServiceModel, SimConfig};
use crate::workload::{Query, WorkloadSpec};

#[derive(Debug, thiserror::Error)]
pub enum DescriptorError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing descriptor: {0}")]
    Parse(String),
    #[error("invalid descriptor: {0}")]
    Invalid(String),
    #[error("unknown workload {0:?}")]
    UnknownWorkload(String),
}

fn invalid(msg: impl Into<String>) -> DescriptorError {
    DescriptorError::Invalid(msg.into())
}

fn read(path: &Path) -> Result<String, DescriptorError> {
    std::fs::read_to_string(path).map_err(|source| DescriptorError::Io { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    #[serde(default = "localhost")]
    pub host: String,
    pub client_port: u16,
    pub server_port: u16,
    /// Clock offset applied in simulation.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub clock_skew_ms: i64,
}

fn localhost() -> String {
    "127.0.0.1".into()
}

fn is_zero(v: &i64) -> bool {
    *v == 0
}

impl NodeSpec {
    pub fn client_addr(&self) -> String {
        format!("{}:{}", self.host, self.client_port)
    }

    pub fn server_addr(&self) -> String {
        format!("{}:{}", self.host, self.server_port)
    }
}

/// Bidirectional server link. Delay bounds apply in simulation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_delay_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_delay_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDescriptor {
    pub name: String,
    pub protocol: ProtocolKind,
    pub replicas: u32,
    pub partitions: u32,
    #[serde(default)]
    pub tree: TreeShape,
    /// Client implementation used by the shell; the cluster protocol's when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shell_client: Option<ProtocolKind>,
    #[serde(default = "default_resend")]
    pub resend_interval_ms: u64,
    #[serde(default = "default_capacity")]
    pub queue_capacity: usize,
    #[serde(default)]
    pub storage: StorageSettings,
    #[serde(default)]
    pub protocol_properties: ProtocolProperties,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

fn default_resend() -> u64 {
    DEFAULT_RESEND_INTERVAL_MS
}
fn default_capacity() -> usize {
    DEFAULT_QUEUE_CAPACITY
}

impl ClusterDescriptor {
    /// Full-replication `replicas x partitions` cluster on 127.0.0.1. Node
    /// `i` (in replica-major order) gets client port `base_port + 2i` and
    /// server port `base_port + 2i + 1`. Links join every pair of nodes
    /// sharing a replica or a partition.
    pub fn scaffold(protocol: ProtocolKind, replicas: u32, partitions: u32, base_port: u16) -> Self {
        let shape = ClusterShape::new(replicas, partitions);
        let nodes: Vec<NodeSpec> = shape
            .nodes()
            .enumerate()
            .map(|(i, id)| NodeSpec {
                id,
                host: localhost(),
                client_port: base_port.wrapping_add(2 * i as u16),
                server_port: base_port.wrapping_add(2 * i as u16 + 1),
                clock_skew_ms: 0,
            })
            .collect();
        let mut links = Vec::new();
        for (i, a) in nodes.iter().enumerate() {
            for b in &nodes[i + 1..] {
                if a.id.replica == b.id.replica || a.id.partition == b.id.partition {
                    links.push(LinkSpec { a: a.id, b: b.id, min_delay_ms: None, max_delay_ms: None });
                }
            }
        }
        ClusterDescriptor {
            name: format!("{protocol}-{replicas}x{partitions}"),
            protocol,
            replicas,
            partitions,
            tree: TreeShape::Star,
            shell_client: None,
            resend_interval_ms: DEFAULT_RESEND_INTERVAL_MS,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            storage: StorageSettings::default(),
            protocol_properties: ProtocolProperties::default(),
            nodes,
            links,
        }
    }

    pub fn shape(&self) -> ClusterShape {
        ClusterShape::new(self.replicas, self.partitions)
    }

    pub fn from_toml(text: &str) -> Result<Self, DescriptorError> {
        let d: ClusterDescriptor = toml::from_str(text).map_err(|e| DescriptorError::Parse(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self, DescriptorError> {
        Self::from_toml(&read(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("descriptor serializes")
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn shell_client(&self) -> ProtocolKind {
        self.shell_client.unwrap_or(self.protocol)
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.replicas == 0 || self.partitions == 0 {
            return Err(invalid("replicas and partitions must be positive"));
        }
        if self.queue_capacity == 0 || self.resend_interval_ms == 0 {
            return Err(invalid("queue_capacity and resend_interval_ms must be positive"));
        }
        let shape = self.shape();
        let mut declared = BTreeSet::new();
        let mut ports = BTreeSet::new();
        for n in &self.nodes {
            if !shape.contains(n.id) {
                return Err(invalid(format!("node {} outside {}x{} topology", n.id, self.replicas, self.partitions)));
            }
            if !declared.insert(n.id) {
                return Err(invalid(format!("node {} declared twice", n.id)));
            }
            for port in [n.client_port, n.server_port] {
                if port != 0 && !ports.insert((n.host.clone(), port)) {
                    return Err(invalid(format!("port {}:{port} used twice", n.host)));
                }
            }
        }
        if let Some(missing) = shape.nodes().find(|id| !declared.contains(id)) {
            return Err(invalid(format!("node {missing} not declared")));
        }
        let mut seen = BTreeSet::new();
        for l in &self.links {
            for end in [l.a, l.b] {
                if !declared.contains(&end) {
                    return Err(invalid(format!("link {}-{} references undeclared node {end}", l.a, l.b)));
                }
            }
            if l.a == l.b {
                return Err(invalid(format!("link from {} to itself", l.a)));
            }
            if !seen.insert((l.a.min(l.b), l.a.max(l.b))) {
                return Err(invalid(format!("link {}-{} listed twice", l.a, l.b)));
            }
            if let (Some(lo), Some(hi)) = (l.min_delay_ms, l.max_delay_ms) {
                if !(0.0 <= lo && lo <= hi) {
                    return Err(invalid(format!("link {}-{}: bad delay bounds", l.a, l.b)));
                }
            }
        }
        Ok(())
    }

    /// Directed server links; every link runs both ways.
    pub fn directed_links(&self) -> Vec<(NodeId, NodeId)> {
        self.links.iter().flat_map(|l| [(l.a, l.b), (l.b, l.a)]).collect()
    }

    fn linked_peers(&self, node: NodeId) -> Vec<NodeId> {
        self.links
            .iter()
            .filter_map(|l| {
                if l.a == node {
                    Some(l.b)
                } else if l.b == node {
                    Some(l.a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Server config of every node. Peer addresses come from the links; extra
    /// protocol properties override the generated ones.
    pub fn server_configs(&self) -> Vec<ServerConfig> {
        let shape = self.shape();
        self.nodes
            .iter()
            .map(|n| {
                let mut cfg = ServerConfig::for_cluster(n.id, shape, self.tree);
                cfg.host = n.host.clone();
                cfg.client_port = n.client_port;
                cfg.server_port = n.server_port;
                cfg.peers = self
                    .linked_peers(n.id)
                    .into_iter()
                    .filter_map(|p| self.node(p).map(|spec| (p, spec.server_addr())))
                    .collect();
                for (k, v) in &self.protocol_properties.0 {
                    cfg.protocol_properties.0.insert(k.clone(), v.clone());
                }
                cfg.storage = self.storage.clone();
                if let Some(path) = &self.storage.log_path {
                    cfg.storage.log_path = Some(path.join(format!("{}.log", n.id)));
                }
                cfg.resend_interval_ms = self.resend_interval_ms;
                cfg.queue_capacity = self.queue_capacity;
                cfg
            })
            .collect()
    }

    pub fn client_addresses(&self) -> BTreeMap<NodeId, String> {
        self.nodes.iter().map(|n| (n.id, n.client_addr())).collect()
    }
}

/// A machine running benchmark clients, attached to one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMachine {
    pub name: String,
    #[serde(default = "local")]
    pub host: String,
    pub replica: u32,
    /// Command prefix used to run the client on a remote host; the host and
    /// client arguments are appended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub launcher: Option<String>,
}

fn local() -> String {
    "local".into()
}

impl ClientMachine {
    pub fn is_local(&self) -> bool {
        matches!(self.host.as_str(), "local" | "localhost" | "127.0.0.1")
    }
}

/// Network and CPU model for `--sim` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    pub server_delay_min_ms: f64,
    pub server_delay_max_ms: f64,
    pub client_delay_min_ms: f64,
    pub client_delay_max_ms: f64,
    pub service_base_us: u64,
    pub service_per_byte_ns: u64,
    pub client_timeout_ms: u64,
}

impl Default for SimSettings {
    fn default() -> Self {
        let cfg = SimConfig::default();
        SimSettings {
            server_delay_min_ms: cfg.server_link.min_ms,
            server_delay_max_ms: cfg.server_link.max_ms,
            client_delay_min_ms: cfg.client_link.min_ms,
            client_delay_max_ms: cfg.client_link.max_ms,
            service_base_us: cfg.service.base_us,
            service_per_byte_ns: cfg.service.per_byte_ns,
            client_timeout_ms: cfg.client_timeout_ms,
        }
    }
}

impl SimSettings {
    /// Simulator configuration for `cluster`, with per-link delays and clock
    /// skews from its descriptor.
    pub fn sim_config(&self, cluster: &ClusterDescriptor, seed: u64) -> SimConfig {
        let default = Delay::uniform(self.server_delay_min_ms, self.server_delay_max_ms);
        let mut link_overrides = BTreeMap::new();
        for l in &cluster.links {
            if l.min_delay_ms.is_none() && l.max_delay_ms.is_none() {
                continue;
            }
            let d = Delay::uniform(l.min_delay_ms.unwrap_or(default.min_ms), l.max_delay_ms.unwrap_or(default.max_ms));
            link_overrides.insert((l.a, l.b), d);
            link_overrides.insert((l.b, l.a), d);
        }
        SimConfig {
            server_link: default,
            client_link: Delay::uniform(self.client_delay_min_ms, self.client_delay_max_ms),
            link_overrides,
            service: ServiceModel { base_us: self.service_base_us, per_byte_ns: self.service_per_byte_ns },
            clock_skew_ms: cluster
                .nodes
                .iter()
                .filter(|n| n.clock_skew_ms != 0)
                .map(|n| (n.id, n.clock_skew_ms))
                .collect(),
            queue_capacity: cluster.queue_capacity,
            resend_interval_ms: cluster.resend_interval_ms,
            client_timeout_ms: self.client_timeout_ms,
            ..SimConfig::seeded(seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDescriptor {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repetitions: u32,
    /// Workload names to run, in order; every workload when empty.
    #[serde(default)]
    pub run: Vec<String>,
    #[serde(default)]
    pub queries: Vec<String>,
    #[serde(default)]
    pub sim: SimSettings,
    pub clients: Vec<ClientMachine>,
    pub workloads: Vec<WorkloadSpec>,
}

fn one() -> u32 {
    1
}

impl ExperimentDescriptor {
    pub fn from_toml(text: &str) -> Result<Self, DescriptorError> {
        let d: ExperimentDescriptor = toml::from_str(text).map_err(|e| DescriptorError::Parse(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self, DescriptorError> {
        Self::from_toml(&read(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("descriptor serializes")
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.repetitions == 0 {
            return Err(invalid("repetitions must be positive"));
        }
        if self.clients.is_empty() {
            return Err(invalid("no client machines"));
        }
        let mut names = BTreeSet::new();
        for c in &self.clients {
            if !names.insert(&c.name) {
                return Err(invalid(format!("client {:?} declared twice", c.name)));
            }
        }
        let mut workloads = BTreeSet::new();
        for w in &self.workloads {
            if !workloads.insert(&w.name) {
                return Err(invalid(format!("workload {:?} declared twice", w.name)));
            }
            w.validate().map_err(|e| invalid(format!("workload {:?}: {e}", w.name)))?;
        }
        if let Some(bad) = self.run.iter().find(|n| !workloads.contains(n)) {
            return Err(DescriptorError::UnknownWorkload(bad.clone()));
        }
        for q in &self.queries {
            q.parse::<Query>().map_err(|e| invalid(format!("query {q:?}: {e}")))?;
        }
        Ok(())
    }

    /// Checks client attachments against `cluster`.
    pub fn validate_for(&self, cluster: &ClusterDescriptor) -> Result<(), DescriptorError> {
        self.validate()?;
        if let Some(c) = self.clients.iter().find(|c| c.replica >= cluster.replicas) {
            return Err(invalid(format!("client {:?} attached to unknown replica {}", c.name, c.replica)));
        }
        Ok(())
    }

    /// Workloads in execution order.
    pub fn selected(&self) -> Vec<&WorkloadSpec> {
        if self.run.is_empty() {
            self.workloads.iter().collect()
        } else {
            self.run.iter().filter_map(|n| self.workloads.iter().find(|w| &w.name == n)).collect()
        }
    }

    pub fn queries(&self) -> Vec<Query> {
        self.queries.iter().filter_map(|q| q.parse().ok()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::KeyDistribution;

    #[test]
    fn scaffold_is_full_replication() {
        let d = ClusterDescriptor::scaffold(ProtocolKind::GentleRain, 2, 3, 7000);
        d.validate().unwrap();
        assert_eq!(d.nodes.len(), 6);
        // 3 cross-replica pairs plus 3 partition pairs in each replica.
        assert_eq!(d.links.len(), 9);
        assert_eq!(d.directed_links().len(), 18);
        let cfgs = d.server_configs();
        assert_eq!(cfgs.len(), 6);
        let c = &cfgs[4];
        assert_eq!(c.node, NodeId::new(1, 1));
        assert_eq!(c.peers.len(), 3);
        assert_eq!(c.peers[&NodeId::new(0, 1)], "127.0.0.1:7003");
        c.validate().unwrap();
    }

    #[test]
    fn cluster_round_trip() {
        let mut d = ClusterDescriptor::scaffold(ProtocolKind::Cops, 2, 2, 9000);
        d.nodes[1].clock_skew_ms = 50;
        d.links[0].max_delay_ms = Some(5.0);
        d.protocol_properties.set("heartbeat_interval", [20]);
        let text = d.to_toml();
        let back = ClusterDescriptor::from_toml(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn links_must_reference_declared_nodes() {
        let mut d = ClusterDescriptor::scaffold(ProtocolKind::Eventual, 1, 2, 9100);
        d.links.push(LinkSpec { a: NodeId::new(0, 0), b: NodeId::new(5, 5), min_delay_ms: None, max_delay_ms: None });
        assert!(matches!(d.validate(), Err(DescriptorError::Invalid(m)) if m.contains("undeclared")));
        let mut d = ClusterDescriptor::scaffold(ProtocolKind::Eventual, 1, 2, 9100);
        d.nodes.pop();
        assert!(d.validate().is_err());
        let mut d = ClusterDescriptor::scaffold(ProtocolKind::Eventual, 1, 2, 9100);
        d.nodes[1].client_port = d.nodes[0].client_port;
        assert!(d.validate().is_err());
    }

    fn experiment() -> ExperimentDescriptor {
        ExperimentDescriptor {
            name: "grid".into(),
            seed: 7,
            repetitions: 3,
            run: vec!["read-heavy".into(), "write-heavy".into()],
            queries: vec!["sum(throughput)".into(), "max(put_latency_p95) where replica=0".into()],
            sim: SimSettings::default(),
            clients: vec![
                ClientMachine { name: "c0".into(), host: "local".into(), replica: 0, launcher: None },
                ClientMachine { name: "c1".into(), host: "10.0.0.9".into(), replica: 1, launcher: Some("ssh".into()) },
            ],
            workloads: vec![
                WorkloadSpec { name: "read-heavy".into(), read_proportion: 0.9, insert_proportion: 0.1, ..Default::default() },
                WorkloadSpec {
                    name: "write-heavy".into(),
                    read_proportion: 0.1,
                    insert_proportion: 0.9,
                    key_distribution: KeyDistribution::Uniform,
                    ..Default::default()
                },
            ],
        }
    }

    #[test]
    fn experiment_round_trip() {
        let e = experiment();
        let back = ExperimentDescriptor::from_toml(&e.to_toml()).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.selected().len(), 2);
    }

    #[test]
    fn experiment_validation() {
        let mut e = experiment();
        e.run.push("scan-heavy".into());
        assert!(matches!(e.validate(), Err(DescriptorError::UnknownWorkload(w)) if w == "scan-heavy"));
        let mut e = experiment();
        e.queries.push("avg(".into());
        assert!(e.validate().is_err());
        let mut e = experiment();
        e.clients[1].replica = 4;
        assert!(e.validate().is_ok());
        assert!(e.validate_for(&ClusterDescriptor::scaffold(ProtocolKind::Cops, 2, 1, 9200)).is_err());
    }

    #[test]
    fn sim_config_carries_skew_and_link_delays() {
        let mut d = ClusterDescriptor::scaffold(ProtocolKind::GentleRain, 2, 2, 9300);
        d.nodes[0].clock_skew_ms = 50;
        d.links[0].min_delay_ms = Some(1.0);
        d.links[0].max_delay_ms = Some(2.0);
        let cfg = SimSettings::default().sim_config(&d, 3);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.clock_skew_ms[&NodeId::new(0, 0)], 50);
        let (a, b) = (d.links[0].a, d.links[0].b);
        assert_eq!(cfg.link_overrides[&(b, a)], Delay::uniform(1.0, 2.0));
    }
}
