//! Reference protocols and the pieces they share.

pub mod causalspartan;
pub mod cops;
pub mod eventual;
pub mod gentlerain;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ServerConfig};
use crate::history::{value_tag, AppliedEvent, GetEvent, HistoryEvent, PutEvent, VersionRef};
use crate::node::{ClusterShape, NodeId};
use crate::runtime::{Context, Protocol};

/// The built-in protocols, by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    #[default]
    Eventual,
    Cops,
    GentleRain,
    CausalSpartan,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 4] =
        [ProtocolKind::Eventual, ProtocolKind::Cops, ProtocolKind::GentleRain, ProtocolKind::CausalSpartan];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Eventual => eventual::Eventual::NAME,
            ProtocolKind::Cops => cops::Cops::NAME,
            ProtocolKind::GentleRain => gentlerain::GentleRain::NAME,
            ProtocolKind::CausalSpartan => causalspartan::CausalSpartan::NAME,
        }
    }

    pub fn is_causal(self) -> bool {
        self != ProtocolKind::Eventual
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown protocol {s:?}"))
    }
}

/// Expands `$body` with `$p` aliased to the protocol type and `$c` to its
/// client type for the given [`ProtocolKind`].
#[macro_export]
macro_rules! with_protocol {
    ($kind:expr, $p:ident, $c:ident => $body:expr) => {
        match $kind {
            $crate::protocols::ProtocolKind::Eventual => {
                #[allow(dead_code)]
                type $p = $crate::protocols::eventual::Eventual;
                #[allow(dead_code)]
                type $c = $crate::protocols::eventual::EventualClient;
                $body
            }
            $crate::protocols::ProtocolKind::Cops => {
                #[allow(dead_code)]
                type $p = $crate::protocols::cops::Cops;
                #[allow(dead_code)]
                type $c = $crate::protocols::cops::CopsClient;
                $body
            }
            $crate::protocols::ProtocolKind::GentleRain => {
                #[allow(dead_code)]
                type $p = $crate::protocols::gentlerain::GentleRain;
                #[allow(dead_code)]
                type $c = $crate::protocols::gentlerain::GentleRainClient;
                $body
            }
            $crate::protocols::ProtocolKind::CausalSpartan => {
                #[allow(dead_code)]
                type $p = $crate::protocols::causalspartan::CausalSpartan;
                #[allow(dead_code)]
                type $c = $crate::protocols::causalspartan::CausalSpartanClient;
                $body
            }
        }
    };
}

/// Placement read from the standard protocol properties.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub node: NodeId,
    pub shape: ClusterShape,
    pub parent: u32,
    pub children: Vec<u32>,
}

impl Placement {
    pub fn from_config(cfg: &ServerConfig) -> Result<Self, ConfigError> {
        let p = &cfg.protocol_properties;
        let node = NodeId::new(p.first("dc_id")?, p.first("p_id")?);
        if node != cfg.node {
            return Err(ConfigError::Invalid(format!("dc_id/p_id name {node} but config is for {}", cfg.node)));
        }
        let shape = cfg.shape()?;
        if !shape.contains(node) {
            return Err(ConfigError::Invalid(format!("{node} outside {}x{}", shape.replicas, shape.partitions)));
        }
        let parent = p.first_or("parent_p_id", 0)?;
        let children = p.list("children_p_ids")?;
        Ok(Placement { node, shape, parent, children })
    }

    pub fn replica(&self) -> u32 {
        self.node.replica
    }

    pub fn is_root(&self) -> bool {
        self.parent == self.node.partition
    }

    /// Same partition in every other replica.
    pub fn peers(&self) -> Vec<NodeId> {
        self.shape.peers(self.node).collect()
    }
}

/// Tree aggregation of per-replica clock vectors, shared by the stable-time
/// protocols. Leaves report elementwise minima upward; the root turns the
/// result into a stable value and pushes it back down.
pub struct StableTree {
    pub placement: Placement,
    children_vvs: Mutex<BTreeMap<u32, Vec<u64>>>,
}

impl StableTree {
    pub fn new(placement: Placement) -> Self {
        let zero = vec![0; placement.shape.replicas as usize];
        let children_vvs = placement.children.iter().map(|c| (*c, zero.clone())).collect();
        StableTree { placement, children_vvs: Mutex::new(children_vvs) }
    }

    pub fn set_child(&self, child: u32, vv: Vec<u64>) {
        self.children_vvs.lock().insert(child, vv);
    }

    /// Elementwise minimum of `own` and every child report.
    pub fn min_vector(&self, own: Vec<u64>) -> Vec<u64> {
        let mut out = own;
        for vv in self.children_vvs.lock().values() {
            for (slot, v) in out.iter_mut().zip(vv) {
                *slot = (*slot).min(*v);
            }
        }
        out
    }

    pub fn parent_node(&self) -> NodeId {
        NodeId::new(self.placement.replica(), self.placement.parent)
    }

    pub fn child_nodes(&self) -> Vec<NodeId> {
        self.children_vvs.lock().keys().map(|c| NodeId::new(self.placement.replica(), *c)).collect()
    }
}

/// Raises every slot of `target` to at least the matching slot of `sample`.
pub fn merge_max(target: &mut [u64], sample: &[u64]) {
    for (t, s) in target.iter_mut().zip(sample) {
        *t = (*t).max(*s);
    }
}

fn send_logged<P: Protocol>(ctx: &dyn Context<P>, dest: NodeId, msg: &P::ServerMsg) {
    if let Err(e) = ctx.send_to_server(dest, msg) {
        log::error!("{}: send to {dest} failed: {e}", ctx.node());
    }
}

fn reply_logged<P: Protocol>(ctx: &dyn Context<P>, agent: &crate::runtime::ReplyAgent, reply: &P::Reply) {
    if let Err(e) = ctx.send_reply(agent, reply) {
        log::warn!("{}: reply to request {} failed: {e}", ctx.node(), agent.request_id);
    }
}

pub(crate) fn record_put<P: Protocol>(
    ctx: &dyn Context<P>,
    session: u64,
    key: &str,
    value: &[u8],
    rank: (u64, u64),
    deps: Option<Vec<VersionRef>>,
) {
    if !ctx.recording() {
        return;
    }
    let node = ctx.node().to_string();
    let version = value_tag(value);
    ctx.record(HistoryEvent::Put(PutEvent {
        session,
        node: node.clone(),
        key: key.to_string(),
        version,
        rank_hi: rank.0,
        rank_lo: rank.1,
        has_explicit_deps: deps.is_some(),
        explicit_deps: deps.unwrap_or_default(),
    }));
    ctx.record(HistoryEvent::Applied(AppliedEvent { node, key: key.to_string(), version }));
}

pub(crate) fn record_applied<P: Protocol>(ctx: &dyn Context<P>, key: &str, value: &[u8]) {
    if ctx.recording() {
        ctx.record(HistoryEvent::Applied(AppliedEvent {
            node: ctx.node().to_string(),
            key: key.to_string(),
            version: value_tag(value),
        }));
    }
}

pub(crate) fn record_visible<P: Protocol>(ctx: &dyn Context<P>, key: &str, value: &[u8]) {
    if ctx.recording() {
        ctx.record(HistoryEvent::Visible(AppliedEvent {
            node: ctx.node().to_string(),
            key: key.to_string(),
            version: value_tag(value),
        }));
    }
}

/// Returned version of a get, for history recording.
pub(crate) struct Returned<'a> {
    pub value: &'a [u8],
    pub rank: (u64, u64),
    pub ut: u64,
    pub sr: u32,
}

pub(crate) fn record_get<P: Protocol>(
    ctx: &dyn Context<P>,
    session: u64,
    key: &str,
    returned: Option<Returned<'_>>,
    stable: Vec<u64>,
) {
    if !ctx.recording() {
        return;
    }
    let mut ev = GetEvent { session, node: ctx.node().to_string(), key: key.to_string(), stable, ..Default::default() };
    if let Some(r) = returned {
        ev.version = value_tag(r.value);
        ev.rank_hi = r.rank.0;
        ev.rank_lo = r.rank.1;
        ev.ut = r.ut;
        ev.sr = r.sr;
    }
    ctx.record(HistoryEvent::Get(ev));
}

/// Hex plus lossy UTF-8 rendering used by client metadata strings.
pub fn render_value(value: &[u8]) -> String {
    let hex: String = value.iter().take(32).map(|b| format!("{b:02x}")).collect();
    let ellipsis = if value.len() > 32 { "..." } else { "" };
    format!("{hex}{ellipsis} {:?}", String::from_utf8_lossy(value))
}
