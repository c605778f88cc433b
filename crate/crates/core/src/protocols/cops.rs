//! COPS-style causal consistency with explicit dependencies.
//!
//! Clients carry every version they have read since their last write. A
//! replicated write stays pending at the receiver until the partitions owning
//! its dependencies confirm that each dependency is stored there. Nothing is
//! ever garbage collected.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use parking_lot::Mutex;

use super::{record_applied, record_get, record_put, record_visible, reply_logged, send_logged, Placement, Returned};
use crate::codec::Message;
use crate::config::{ConfigError, ServerConfig};
use crate::history::VersionRef;
use crate::node::{partition_for, NodeId};
use crate::runtime::{ClientError, ClientSetup, Context, GetOutcome, OpKind, Protocol, ProtocolClient, PutOutcome, ReplyAgent};
use crate::storage::{ReplicatedStore, Storage, StorageStatus};

crate::message! {
    pub struct CopsRecord {
        1 => pub key: String [required],
        2 => pub value: Vec<u8>,
        3 => pub lamport: u64,
        4 => pub sr: u32,
    }
}

crate::message! {
    pub struct Dependency {
        1 => pub key: String [required],
        2 => pub lamport: u64,
        3 => pub sr: u32,
    }
}

crate::message! {
    pub struct CopsGet {
        1 => pub key: String [required],
    }
}

crate::message! {
    pub struct CopsPutAfter {
        1 => pub key: String [required],
        2 => pub value: Vec<u8>,
        3 => pub deps: Vec<Dependency>,
    }
}

crate::oneof! {
    pub enum CopsClientMessage {
        1 => Get(CopsGet),
        2 => PutAfter(CopsPutAfter),
    }
}

crate::message! {
    pub struct CopsReplicate {
        1 => pub record: Option<CopsRecord>,
        2 => pub deps: Vec<Dependency>,
    }
}

crate::message! {
    pub struct CopsDepCheck {
        1 => pub id: u64,
        2 => pub dep: Option<Dependency>,
    }
}

crate::message! {
    pub struct CopsDepAck {
        1 => pub id: u64,
        2 => pub dep: Option<Dependency>,
    }
}

crate::oneof! {
    pub enum CopsServerMessage {
        1 => Replicate(CopsReplicate),
        2 => DepCheck(CopsDepCheck),
        3 => DepAck(CopsDepAck),
    }
}

crate::message! {
    pub struct CopsGetReply {
        1 => pub value: Vec<u8>,
        2 => pub lamport: u64,
        3 => pub sr: u32,
    }
}

crate::message! {
    pub struct CopsPutReply {
        1 => pub lamport: u64,
        2 => pub sr: u32,
    }
}

crate::message! {
    pub struct CopsReply {
        1 => pub status: bool,
        2 => pub get: Option<CopsGetReply>,
        3 => pub put: Option<CopsPutReply>,
    }
}

/// Version stamps order versions of a key.
pub fn by_stamp(a: &CopsRecord, b: &CopsRecord) -> Ordering {
    (a.lamport, a.sr).cmp(&(b.lamport, b.sr))
}

struct Pending {
    record: CopsRecord,
    remaining: usize,
}

/// Who is waiting for a version to become visible here.
#[derive(Clone, Copy)]
enum Waiter {
    /// Dependency check from another partition, answered with an ack.
    Remote { from: NodeId, id: u64 },
    /// A pending write on this partition.
    Local { pending: u64 },
}

#[derive(Default)]
struct State {
    lamport: u64,
    next_id: u64,
    pending: BTreeMap<u64, Pending>,
    /// Outstanding remote checks: check id to pending write.
    checks: BTreeMap<u64, u64>,
    /// Parked waiters per (key, lamport, sr).
    parked: BTreeMap<(String, u64, u32), Vec<Waiter>>,
}

pub struct Cops {
    placement: Placement,
    store: Storage<CopsRecord>,
    state: Mutex<State>,
}

enum Outgoing {
    Ack { to: NodeId, id: u64, dep: Dependency },
    Check { to: NodeId, id: u64, dep: Dependency },
}

impl Cops {
    pub fn storage(&self) -> &Storage<CopsRecord> {
        &self.store
    }

    /// Writes received but not yet visible.
    pub fn pending_count(&self) -> usize {
        self.state.lock().pending.len()
    }

    pub fn lamport(&self) -> u64 {
        self.state.lock().lamport
    }

    fn is_present(&self, dep: &Dependency) -> bool {
        self.store.contains(&dep.key, |r| r.lamport == dep.lamport && r.sr == dep.sr)
    }

    /// Inserts a visible record and releases everything parked on it,
    /// cascading through local pending writes.
    fn make_visible(&self, ctx: &dyn Context<Self>, state: &mut State, record: CopsRecord, out: &mut Vec<Outgoing>) {
        let mut ready = vec![record];
        while let Some(rec) = ready.pop() {
            let key = rec.key.clone();
            let stamp = (rec.lamport, rec.sr);
            let value = rec.value.clone();
            if self.store.insert(&key, rec) != StorageStatus::Success {
                log::error!("{}: insert of {key} failed", ctx.node());
                continue;
            }
            record_visible(ctx, &key, &value);
            let Some(waiters) = state.parked.remove(&(key.clone(), stamp.0, stamp.1)) else { continue };
            for w in waiters {
                match w {
                    Waiter::Remote { from, id } => out.push(Outgoing::Ack {
                        to: from,
                        id,
                        dep: Dependency { key: key.clone(), lamport: stamp.0, sr: stamp.1 },
                    }),
                    Waiter::Local { pending } => {
                        if let Some(rec) = Self::satisfy(state, pending) {
                            ready.push(rec);
                        }
                    }
                }
            }
        }
    }

    /// Counts down one dependency of `pending`; returns its record when done.
    fn satisfy(state: &mut State, pending: u64) -> Option<CopsRecord> {
        let p = state.pending.get_mut(&pending)?;
        p.remaining -= 1;
        if p.remaining == 0 {
            state.pending.remove(&pending).map(|p| p.record)
        } else {
            None
        }
    }

    fn flush(ctx: &dyn Context<Self>, out: Vec<Outgoing>) {
        for o in out {
            match o {
                Outgoing::Ack { to, id, dep } => {
                    send_logged(ctx, to, &CopsServerMessage::DepAck(CopsDepAck { id, dep: Some(dep) }))
                }
                Outgoing::Check { to, id, dep } => {
                    send_logged(ctx, to, &CopsServerMessage::DepCheck(CopsDepCheck { id, dep: Some(dep) }))
                }
            }
        }
    }

    fn handle_replicate(&self, ctx: &dyn Context<Self>, record: CopsRecord, deps: Vec<Dependency>) {
        let mut out = Vec::new();
        let mut state = self.state.lock();
        state.lamport = state.lamport.max(record.lamport);
        record_applied(ctx, &record.key, &record.value);
        let me = ctx.node();
        let pid = state.next_id;
        state.next_id += 1;
        let mut remaining = 0;
        for dep in deps {
            let owner = NodeId::new(me.replica, partition_for(&dep.key, self.placement.shape.partitions));
            if owner == me {
                if !self.is_present(&dep) {
                    remaining += 1;
                    state.parked.entry((dep.key.clone(), dep.lamport, dep.sr)).or_default().push(Waiter::Local { pending: pid });
                }
            } else {
                remaining += 1;
                let id = state.next_id;
                state.next_id += 1;
                state.checks.insert(id, pid);
                out.push(Outgoing::Check { to: owner, id, dep });
            }
        }
        if remaining == 0 {
            self.make_visible(ctx, &mut state, record, &mut out);
        } else {
            state.pending.insert(pid, Pending { record, remaining });
        }
        drop(state);
        Self::flush(ctx, out);
    }
}

impl Protocol for Cops {
    const NAME: &'static str = "cops";
    type ServerMsg = CopsServerMessage;
    type ClientMsg = CopsClientMessage;
    type Reply = CopsReply;
    type Client = CopsClient;

    fn build(config: &ServerConfig) -> Result<Self, ConfigError> {
        let store = Storage::open(&config.storage, by_stamp).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Cops { placement: Placement::from_config(config)?, store, state: Mutex::new(State::default()) })
    }

    fn handle_client(&self, ctx: &dyn Context<Self>, agent: ReplyAgent, msg: CopsClientMessage) {
        let m = self.placement.replica();
        let reply = match msg {
            CopsClientMessage::PutAfter(put) => {
                let mut out = Vec::new();
                let mut state = self.state.lock();
                let observed = put.deps.iter().map(|d| d.lamport).max().unwrap_or(0);
                state.lamport = state.lamport.max(observed) + 1;
                let record = CopsRecord { key: put.key.clone(), value: put.value, lamport: state.lamport, sr: m };
                let sm = CopsServerMessage::Replicate(CopsReplicate { record: Some(record.clone()), deps: put.deps.clone() });
                for peer in self.placement.peers() {
                    send_logged(ctx, peer, &sm);
                }
                let deps = put
                    .deps
                    .iter()
                    .map(|d| VersionRef { key: d.key.clone(), id: 0, rank_hi: d.lamport, rank_lo: d.sr as u64 })
                    .collect();
                record_put(ctx, agent.client_id, &put.key, &record.value, (record.lamport, m as u64), Some(deps));
                let stamp = CopsPutReply { lamport: record.lamport, sr: m };
                self.make_visible(ctx, &mut state, record, &mut out);
                drop(state);
                Self::flush(ctx, out);
                CopsReply { status: true, put: Some(stamp), ..Default::default() }
            }
            CopsClientMessage::Get(get) => match self.store.latest(&get.key, |_| true) {
                Some(rec) => {
                    let returned = Returned { value: &rec.value, rank: (rec.lamport, rec.sr as u64), ut: rec.lamport, sr: rec.sr };
                    record_get(ctx, agent.client_id, &get.key, Some(returned), Vec::new());
                    CopsReply {
                        status: true,
                        get: Some(CopsGetReply { value: rec.value, lamport: rec.lamport, sr: rec.sr }),
                        ..Default::default()
                    }
                }
                None => {
                    record_get(ctx, agent.client_id, &get.key, None, Vec::new());
                    CopsReply::default()
                }
            },
        };
        reply_logged(ctx, &agent, &reply);
    }

    fn handle_server(&self, ctx: &dyn Context<Self>, from: NodeId, msg: CopsServerMessage) {
        match msg {
            CopsServerMessage::Replicate(CopsReplicate { record: Some(record), deps }) => {
                self.handle_replicate(ctx, record, deps)
            }
            CopsServerMessage::DepCheck(CopsDepCheck { id, dep: Some(dep) }) => {
                if self.is_present(&dep) {
                    send_logged(ctx, from, &CopsServerMessage::DepAck(CopsDepAck { id, dep: Some(dep) }));
                } else {
                    let mut state = self.state.lock();
                    // Re-check under the lock: visibility changes only while it is held.
                    if self.is_present(&dep) {
                        drop(state);
                        send_logged(ctx, from, &CopsServerMessage::DepAck(CopsDepAck { id, dep: Some(dep) }));
                    } else {
                        state.parked.entry((dep.key, dep.lamport, dep.sr)).or_default().push(Waiter::Remote { from, id });
                    }
                }
            }
            CopsServerMessage::DepAck(CopsDepAck { id, .. }) => {
                let mut out = Vec::new();
                let mut state = self.state.lock();
                let Some(pid) = state.checks.remove(&id) else {
                    log::warn!("{}: ack for unknown check {id}", ctx.node());
                    return;
                };
                if let Some(record) = Self::satisfy(&mut state, pid) {
                    self.make_visible(ctx, &mut state, record, &mut out);
                }
                drop(state);
                Self::flush(ctx, out);
            }
            other => log::warn!("{}: malformed message {other:?}", ctx.node()),
        }
    }

    fn store(&self) -> &dyn ReplicatedStore {
        &self.store
    }

    fn classify(msg: &CopsClientMessage) -> OpKind {
        match msg {
            CopsClientMessage::Get(_) => OpKind::Get,
            CopsClientMessage::PutAfter(_) => OpKind::Put,
        }
    }

    fn heads(&self) -> BTreeMap<String, Vec<u8>> {
        self.store.heads().into_iter().map(|(k, r)| (k, r.encode())).collect()
    }
}

pub struct CopsClient {
    setup: ClientSetup,
    /// Versions read since the last write, plus that write.
    deps: Vec<Dependency>,
    pending_key: Option<String>,
    last_put_deps: usize,
}

impl CopsClient {
    pub fn context(&self) -> &[Dependency] {
        &self.deps
    }
}

impl ProtocolClient for CopsClient {
    type Protocol = Cops;

    fn new(setup: ClientSetup) -> Self {
        CopsClient { setup, deps: Vec::new(), pending_key: None, last_put_deps: 0 }
    }

    fn setup(&self) -> &ClientSetup {
        &self.setup
    }

    fn put_request(&mut self, key: &str, value: Vec<u8>) -> CopsClientMessage {
        self.pending_key = Some(key.to_string());
        self.last_put_deps = self.deps.len();
        CopsClientMessage::PutAfter(CopsPutAfter { key: key.to_string(), value, deps: self.deps.clone() })
    }

    fn put_complete(&mut self, reply: CopsReply) -> Result<PutOutcome, ClientError> {
        let key = self.pending_key.take().ok_or(ClientError::UnexpectedReply)?;
        match reply.put {
            Some(p) if reply.status => {
                self.deps = vec![Dependency { key, lamport: p.lamport, sr: p.sr }];
                Ok(PutOutcome { meta: format!("vs=({},{})", p.lamport, p.sr) })
            }
            _ if !reply.status => Err(ClientError::Failed),
            _ => Err(ClientError::UnexpectedReply),
        }
    }

    fn get_request(&mut self, key: &str) -> CopsClientMessage {
        self.pending_key = Some(key.to_string());
        CopsClientMessage::Get(CopsGet { key: key.to_string() })
    }

    fn get_complete(&mut self, reply: CopsReply) -> Result<GetOutcome, ClientError> {
        let key = self.pending_key.take().ok_or(ClientError::UnexpectedReply)?;
        match reply.get {
            Some(g) if reply.status => {
                self.deps.push(Dependency { key, lamport: g.lamport, sr: g.sr });
                Ok(GetOutcome { meta: format!("vs=({},{})", g.lamport, g.sr), value: Some(g.value) })
            }
            None if !reply.status => Ok(GetOutcome { value: None, meta: String::new() }),
            _ => Err(ClientError::UnexpectedReply),
        }
    }

    fn last_put_deps(&self) -> usize {
        self.last_put_deps
    }
}
