//! Node identity, key partitioning, and replica/partition topology.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A server, identified by its replica (datacenter) and partition.
///
/// Renders as `"<replica>_<partition>"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId {
    pub replica: u32,
    pub partition: u32,
}

impl NodeId {
    pub const fn new(replica: u32, partition: u32) -> Self {
        NodeId { replica, partition }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.replica, self.partition)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid node id {0:?}: expected <replica>_<partition>")]
pub struct ParseNodeIdError(pub String);

impl FromStr for NodeId {
    type Err = ParseNodeIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseNodeIdError(s.to_string());
        let (r, p) = s.split_once('_').ok_or_else(err)?;
        Ok(NodeId { replica: r.parse().map_err(|_| err())?, partition: p.parse().map_err(|_| err())? })
    }
}

impl TryFrom<String> for NodeId {
    type Error = ParseNodeIdError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> String {
        id.to_string()
    }
}

/// FNV-1a, stable across platforms and releases.
pub fn key_hash(key: &str) -> u64 {
    key_hash_bytes(key.as_bytes())
}

/// 64-bit FNV-1a.
pub fn key_hash_bytes(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in bytes {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Partition owning `key` among `num_partitions`.
pub fn partition_for(key: &str, num_partitions: u32) -> u32 {
    assert!(num_partitions > 0, "at least one partition");
    (key_hash(key) % num_partitions as u64) as u32
}

/// Full replication: every replica holds every partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterShape {
    pub replicas: u32,
    pub partitions: u32,
}

impl ClusterShape {
    pub const fn new(replicas: u32, partitions: u32) -> Self {
        ClusterShape { replicas, partitions }
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.replica < self.replicas && node.partition < self.partitions
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.replicas).flat_map(move |r| (0..self.partitions).map(move |p| NodeId::new(r, p)))
    }

    pub fn len(&self) -> usize {
        (self.replicas * self.partitions) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dense index, replica-major.
    pub fn index(&self, node: NodeId) -> usize {
        (node.replica * self.partitions + node.partition) as usize
    }

    /// Same partition in every other replica.
    pub fn peers(&self, node: NodeId) -> impl Iterator<Item = NodeId> {
        let partition = node.partition;
        (0..self.replicas).filter(move |r| *r != node.replica).map(move |r| NodeId::new(r, partition))
    }

    /// Node in `replica` owning `key`.
    pub fn owner(&self, replica: u32, key: &str) -> NodeId {
        NodeId::new(replica, partition_for(key, self.partitions))
    }
}

/// Shape of the per-replica aggregation tree used for stable-time computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeShape {
    /// Partition 0 is the root; every other partition is its child.
    #[default]
    Star,
    /// Partition `p` is the child of `p - 1`.
    Chain,
}

impl TreeShape {
    pub fn parent(self, partition: u32) -> u32 {
        match self {
            TreeShape::Star => 0,
            TreeShape::Chain => partition.saturating_sub(1),
        }
    }

    pub fn children(self, partition: u32, partitions: u32) -> Vec<u32> {
        match self {
            TreeShape::Star if partition == 0 => (1..partitions).collect(),
            TreeShape::Star => Vec::new(),
            TreeShape::Chain if partition + 1 < partitions => vec![partition + 1],
            TreeShape::Chain => Vec::new(),
        }
    }
}

impl FromStr for TreeShape {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "star" => Ok(TreeShape::Star),
            "chain" => Ok(TreeShape::Chain),
            other => Err(format!("unknown tree shape {other:?}")),
        }
    }
}
