//! Offline checks over recorded histories and final replica states.
//!
//! [`check_causal`] flags every get that returned a version while some
//! version in its causal past was not yet present at the reading replica.
//! Dependencies are the protocol's explicit ones when recorded, otherwise
//! session order plus reads-from. A version is present at a replica from the
//! first put, or visible event (applied event when the history has no
//! visible events), at any node of that replica.
//!
//! The check covers presence of the causal past, plus per-session monotonic
//! reads and read-your-writes by version rank. It does not check that a get
//! returned the freshest version in the reader's causal past.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::history::{History, HistoryEvent};
use crate::node::NodeId;

/// Version identity: key and value tag.
pub type VersionId = (String, u64);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckError {
    #[error("event {index}: bad node id {node:?}")]
    BadNode { index: usize, node: String },
    #[error("event {index}: version {version} of {key:?} written twice")]
    DuplicateVersion { index: usize, key: String, version: u64 },
    #[error("event {index}: dependency on {key:?} at rank ({rank_hi},{rank_lo}) matches no put")]
    UnresolvedDependency { index: usize, key: String, rank_hi: u64, rank_lo: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    /// `missing` is in the causal past of the returned version but was not
    /// present at the replica.
    MissingDependency { missing: VersionId },
    /// The returned version was never written.
    UnknownVersion,
    /// An older version than one this session already observed.
    StaleRead { observed: (u64, u64) },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Position of the offending get in the history.
    pub index: usize,
    pub session: u64,
    pub replica: u32,
    pub key: String,
    pub version: u64,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "event {}: session {} read {}#{:x} at replica {}: ", self.index, self.session, self.key, self.version, self.replica)?;
        match &self.kind {
            ViolationKind::MissingDependency { missing } => write!(f, "dependency {}#{:x} not present", missing.0, missing.1),
            ViolationKind::UnknownVersion => write!(f, "version never written"),
            ViolationKind::StaleRead { observed } => write!(f, "older than observed rank ({},{})", observed.0, observed.1),
        }
    }
}

fn replica_of(index: usize, node: &str) -> Result<u32, CheckError> {
    node.parse::<NodeId>().map(|n| n.replica).map_err(|_| CheckError::BadNode { index, node: node.to_string() })
}

struct PutInfo {
    index: usize,
    deps: Vec<usize>,
}

/// Versions, their dependencies and per-replica presence.
struct Graph {
    ids: HashMap<VersionId, usize>,
    names: Vec<VersionId>,
    puts: Vec<PutInfo>,
    /// Earliest presence index per version per replica.
    present: Vec<BTreeMap<u32, usize>>,
}

impl Graph {
    fn build(history: &History) -> Result<Graph, CheckError> {
        let uses_visible = history.events.iter().any(|e| matches!(e, HistoryEvent::Visible(_)));
        let mut g = Graph { ids: HashMap::new(), names: Vec::new(), puts: Vec::new(), present: Vec::new() };
        let mut by_rank: HashMap<(String, u64, u64), usize> = HashMap::new();
        let mut last_put: HashMap<u64, usize> = HashMap::new();
        let mut reads_since: HashMap<u64, Vec<usize>> = HashMap::new();

        // Versions first, so reads of later-numbered puts still resolve.
        for (index, ev) in history.events.iter().enumerate() {
            if let HistoryEvent::Put(p) = ev {
                let id = (p.key.clone(), p.version);
                if g.ids.contains_key(&id) {
                    return Err(CheckError::DuplicateVersion { index, key: p.key.clone(), version: p.version });
                }
                let v = g.names.len();
                g.ids.insert(id.clone(), v);
                g.names.push(id);
                g.puts.push(PutInfo { index, deps: Vec::new() });
                g.present.push(BTreeMap::new());
                by_rank.insert((p.key.clone(), p.rank_hi, p.rank_lo), v);
            }
        }

        for (index, ev) in history.events.iter().enumerate() {
            match ev {
                HistoryEvent::Put(p) => {
                    let v = g.ids[&(p.key.clone(), p.version)];
                    let deps = if p.has_explicit_deps {
                        let mut deps = Vec::new();
                        for d in &p.explicit_deps {
                            let found = if d.id != 0 {
                                g.ids.get(&(d.key.clone(), d.id)).copied()
                            } else {
                                by_rank.get(&(d.key.clone(), d.rank_hi, d.rank_lo)).copied()
                            };
                            match found {
                                Some(dep) => deps.push(dep),
                                None => {
                                    return Err(CheckError::UnresolvedDependency {
                                        index,
                                        key: d.key.clone(),
                                        rank_hi: d.rank_hi,
                                        rank_lo: d.rank_lo,
                                    })
                                }
                            }
                        }
                        deps
                    } else {
                        let mut deps = reads_since.remove(&p.session).unwrap_or_default();
                        deps.extend(last_put.get(&p.session));
                        deps
                    };
                    reads_since.remove(&p.session);
                    last_put.insert(p.session, v);
                    g.puts[v].deps = deps;
                    g.mark(v, replica_of(index, &p.node)?, index);
                }
                HistoryEvent::Get(r) if r.version != 0 => {
                    if let Some(v) = g.ids.get(&(r.key.clone(), r.version)) {
                        reads_since.entry(r.session).or_default().push(*v);
                    }
                }
                HistoryEvent::Applied(a) if !uses_visible => {
                    if let Some(v) = g.ids.get(&(a.key.clone(), a.version)).copied() {
                        g.mark(v, replica_of(index, &a.node)?, index);
                    }
                }
                HistoryEvent::Visible(a) => {
                    if let Some(v) = g.ids.get(&(a.key.clone(), a.version)).copied() {
                        g.mark(v, replica_of(index, &a.node)?, index);
                    }
                }
                _ => {}
            }
        }
        Ok(g)
    }

    fn mark(&mut self, v: usize, replica: u32, index: usize) {
        self.present[v].entry(replica).or_insert(index);
    }
}

/// Latest presence index over the whole causal past of each version, per
/// replica; `usize::MAX` when something never arrived.
struct Need {
    by_replica: BTreeMap<u32, Vec<usize>>,
}

impl Need {
    fn compute(g: &Graph, replicas: &[u32]) -> Need {
        // Puts are numbered in history order and depend only on earlier ones.
        let mut order: Vec<usize> = (0..g.puts.len()).collect();
        order.sort_by_key(|v| g.puts[*v].index);
        let mut by_replica = BTreeMap::new();
        for &r in replicas {
            let mut need = vec![usize::MAX; g.puts.len()];
            for &v in &order {
                let mut n = g.present[v].get(&r).copied().unwrap_or(usize::MAX);
                for &d in &g.puts[v].deps {
                    n = n.max(need[d]);
                }
                need[v] = n;
            }
            by_replica.insert(r, need);
        }
        Need { by_replica }
    }

    /// Descends from `v` to a version that is itself absent at `index`.
    fn culprit(&self, g: &Graph, replica: u32, v: usize, index: usize) -> usize {
        let need = &self.by_replica[&replica];
        let mut cur = v;
        loop {
            let own = g.present[cur].get(&replica).copied().unwrap_or(usize::MAX);
            if own > index {
                return cur;
            }
            match g.puts[cur].deps.iter().find(|d| need[**d] > index) {
                Some(d) => cur = *d,
                None => return cur,
            }
        }
    }
}

pub fn check_causal(history: &History) -> Result<Vec<Violation>, CheckError> {
    let g = Graph::build(history)?;
    let mut replicas: Vec<u32> = Vec::new();
    for (index, ev) in history.events.iter().enumerate() {
        if let HistoryEvent::Get(r) = ev {
            let rep = replica_of(index, &r.node)?;
            if !replicas.contains(&rep) {
                replicas.push(rep);
            }
        }
    }
    let need = Need::compute(&g, &replicas);
    let mut out = Vec::new();
    let mut observed: HashMap<(u64, String), (u64, u64)> = HashMap::new();
    for (index, ev) in history.events.iter().enumerate() {
        match ev {
            HistoryEvent::Put(p) => {
                let e = observed.entry((p.session, p.key.clone())).or_insert((p.rank_hi, p.rank_lo));
                *e = (*e).max((p.rank_hi, p.rank_lo));
            }
            HistoryEvent::Get(r) => {
                let replica = replica_of(index, &r.node)?;
                let violation = |kind| Violation {
                    index,
                    session: r.session,
                    replica,
                    key: r.key.clone(),
                    version: r.version,
                    kind,
                };
                let seen = observed.get(&(r.session, r.key.clone())).copied();
                let rank = (r.rank_hi, r.rank_lo);
                if let Some(prev) = seen {
                    if r.version == 0 || rank < prev {
                        out.push(violation(ViolationKind::StaleRead { observed: prev }));
                    }
                }
                if r.version == 0 {
                    continue;
                }
                observed.insert((r.session, r.key.clone()), seen.map_or(rank, |p| p.max(rank)));
                let Some(&v) = g.ids.get(&(r.key.clone(), r.version)) else {
                    out.push(violation(ViolationKind::UnknownVersion));
                    continue;
                };
                if need.by_replica[&replica][v] > index {
                    let missing = g.names[need.culprit(&g, replica, v, index)].clone();
                    out.push(violation(ViolationKind::MissingDependency { missing }));
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyDiff {
    pub partition: u32,
    pub key: String,
    /// Winning encoded record per replica; `None` where the key is absent.
    pub values: BTreeMap<u32, Option<Vec<u8>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub diffs: Vec<KeyDiff>,
}

/// Compares winning versions of peer partitions across replicas.
pub fn check_convergence(states: &BTreeMap<NodeId, BTreeMap<String, Vec<u8>>>) -> ConvergenceReport {
    let mut by_partition: BTreeMap<u32, BTreeMap<u32, &BTreeMap<String, Vec<u8>>>> = BTreeMap::new();
    for (node, heads) in states {
        by_partition.entry(node.partition).or_default().insert(node.replica, heads);
    }
    let mut diffs = Vec::new();
    for (partition, replicas) in by_partition {
        let mut keys: Vec<&String> = replicas.values().flat_map(|h| h.keys()).collect();
        keys.sort();
        keys.dedup();
        for key in keys {
            let values: BTreeMap<u32, Option<Vec<u8>>> =
                replicas.iter().map(|(r, h)| (*r, h.get(key).cloned())).collect();
            let first = values.values().next();
            if values.values().any(|v| Some(v) != first) {
                diffs.push(KeyDiff { partition, key: key.clone(), values });
            }
        }
    }
    ConvergenceReport { converged: diffs.is_empty(), diffs }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditViolation {
    pub index: usize,
    pub key: String,
    pub version: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Audit {
    /// The protocol has no visibility gate to audit.
    Skipped,
    Checked(Vec<AuditViolation>),
}

/// Replays a history against a protocol's visibility gate: GentleRain's
/// `ut <= gst`, CausalSpartan's `ut <= DSV[sr]`, and for COPS that no
/// remote version is read before it became visible.
pub fn audit_visibility(history: &History, protocol: &str) -> Result<Audit, CheckError> {
    let mut out = Vec::new();
    match protocol {
        "gentlerain" | "causalspartan" => {
            for (index, ev) in history.events.iter().enumerate() {
                let HistoryEvent::Get(r) = ev else { continue };
                let replica = replica_of(index, &r.node)?;
                if r.version == 0 || r.sr == replica {
                    continue;
                }
                let bound = if protocol == "gentlerain" { r.stable.first() } else { r.stable.get(r.sr as usize) };
                match bound {
                    Some(b) if r.ut <= *b => {}
                    b => out.push(AuditViolation {
                        index,
                        key: r.key.clone(),
                        version: r.version,
                        reason: format!("remote ut {} from replica {} above stable {:?}", r.ut, r.sr, b),
                    }),
                }
            }
        }
        "cops" => {
            let mut visible: HashMap<(u32, String, u64), usize> = HashMap::new();
            for (index, ev) in history.events.iter().enumerate() {
                match ev {
                    HistoryEvent::Visible(a) => {
                        visible.entry((replica_of(index, &a.node)?, a.key.clone(), a.version)).or_insert(index);
                    }
                    HistoryEvent::Get(r) if r.version != 0 => {
                        let replica = replica_of(index, &r.node)?;
                        if !visible.contains_key(&(replica, r.key.clone(), r.version)) {
                            out.push(AuditViolation {
                                index,
                                key: r.key.clone(),
                                version: r.version,
                                reason: "read a pending write".to_string(),
                            });
                        }
                    }
                    _ => {}
                }
            }
        }
        _ => return Ok(Audit::Skipped),
    }
    Ok(Audit::Checked(out))
}
