//! GentleRain: physical-clock update times, a per-partition version vector,
//! and a Global Stable Time aggregated over a tree of partitions. A remote
//! version is readable once its update time is at or below GST; a put whose
//! client has seen a time ahead of the local clock waits until the clock
//! passes it.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use parking_lot::Mutex;

use super::{record_applied, record_get, record_put, reply_logged, send_logged, Placement, Returned, StableTree};
use crate::codec::Message;
use crate::config::{ConfigError, ServerConfig};
use crate::node::NodeId;
use crate::runtime::{
    ClientError, ClientSetup, Context, GetOutcome, OpKind, PeriodicTask, Protocol, ProtocolClient, PutOutcome, ReplyAgent,
};
use crate::storage::{ReplicatedStore, Storage, StorageStatus};

pub const HEARTBEAT_TASK: u32 = 1;
pub const GST_TASK: u32 = 2;
pub const DEFAULT_HEARTBEAT_INTERVAL_MS: u64 = 10;
pub const DEFAULT_GST_INTERVAL_MS: u64 = 5;

crate::message! {
    pub struct GrRecord {
        1 => pub k: String [required],
        2 => pub v: Vec<u8>,
        3 => pub ut: u64,
        4 => pub sr: u32,
    }
}

crate::message! {
    pub struct GetMessage {
        1 => pub key: String [required],
        2 => pub gst: u64,
    }
}

crate::message! {
    pub struct PutMessage {
        1 => pub key: String [required],
        2 => pub value: Vec<u8>,
        3 => pub dt: u64,
    }
}

crate::oneof! {
    pub enum GrClientMessage {
        1 => Get(GetMessage),
        2 => Put(PutMessage),
    }
}

crate::message! {
    pub struct GetReply {
        1 => pub value: Vec<u8>,
        2 => pub ut: u64,
        3 => pub gst: u64,
    }
}

crate::message! {
    pub struct PutReply {
        1 => pub ut: u64,
    }
}

crate::message! {
    pub struct GrReply {
        1 => pub status: bool,
        2 => pub get: Option<GetReply>,
        3 => pub put: Option<PutReply>,
    }
}

crate::message! {
    pub struct ReplicateMessage {
        1 => pub dc_id: u32,
        2 => pub key: String,
        3 => pub rec: Option<GrRecord>,
    }
}

crate::message! {
    pub struct HeartbeatMessage {
        1 => pub dc_id: u32,
        2 => pub time: u64,
    }
}

crate::message! {
    pub struct VvMessage {
        1 => pub p_id: u32,
        2 => pub vv: Vec<u64>,
    }
}

crate::message! {
    pub struct GstMessage {
        1 => pub gst: u64,
    }
}

crate::oneof! {
    pub enum GrServerMessage {
        1 => Replicate(ReplicateMessage),
        2 => Heartbeat(HeartbeatMessage),
        3 => Vv(VvMessage),
        4 => Gst(GstMessage),
    }
}

/// Newest update time first; source replica and value bytes break ties.
pub fn by_update_time(a: &GrRecord, b: &GrRecord) -> Ordering {
    (a.ut, a.sr, &a.v).cmp(&(b.ut, b.sr, &b.v))
}

/// Update times, version vectors and GST are microseconds of the node clock.
pub struct GentleRain {
    tree: StableTree,
    store: Storage<GrRecord>,
    gst: AtomicU64,
    vv: Vec<AtomicU64>,
    heartbeat_interval: u64,
    gst_interval: u64,
    /// Put ordering guard; also protects the last replicate/heartbeat time.
    put_lock: Mutex<u64>,
    slept_ms: AtomicU64,
    heartbeats: AtomicU64,
}

impl GentleRain {
    pub fn gst(&self) -> u64 {
        self.gst.load(AtomicOrdering::Acquire)
    }

    pub fn vv(&self) -> Vec<u64> {
        self.vv.iter().map(|v| v.load(AtomicOrdering::Acquire)).collect()
    }

    pub fn storage(&self) -> &Storage<GrRecord> {
        &self.store
    }

    /// Total delay imposed on puts so far.
    pub fn injected_sleep_ms(&self) -> u64 {
        self.slept_ms.load(AtomicOrdering::Relaxed)
    }

    pub fn heartbeats_sent(&self) -> u64 {
        self.heartbeats.load(AtomicOrdering::Relaxed)
    }

    fn m(&self) -> u32 {
        self.tree.placement.replica()
    }

    /// Lock-free monotone maximum.
    pub fn update_gst(&self, sample: u64) {
        self.gst.fetch_max(sample, AtomicOrdering::AcqRel);
    }

    fn raise_vv(&self, replica: u32, t: u64) -> u64 {
        match self.vv.get(replica as usize) {
            Some(slot) => slot.fetch_max(t, AtomicOrdering::AcqRel).max(t),
            None => {
                log::warn!("replica {replica} out of range");
                0
            }
        }
    }

    fn is_visible(&self, rec: &GrRecord, gst: u64) -> bool {
        rec.sr == self.m() || rec.ut <= gst
    }

    fn handle_put(&self, ctx: &dyn Context<Self>, agent: ReplyAgent, put: PutMessage) {
        let now = ctx.now_us();
        if now <= put.dt {
            // The record's time must exceed everything the client depends on.
            let delay = (put.dt - now) / 1000 + 1;
            self.slept_ms.fetch_add(delay, AtomicOrdering::Relaxed);
            ctx.defer(agent, GrClientMessage::Put(put), delay);
            return;
        }
        let m = self.m();
        let rec = {
            let mut last = self.put_lock.lock();
            let ut = self.raise_vv(m, now);
            let rec = GrRecord { k: put.key.clone(), v: put.value, ut, sr: m };
            let sm = GrServerMessage::Replicate(ReplicateMessage { dc_id: m, key: put.key.clone(), rec: Some(rec.clone()) });
            for peer in self.tree.placement.peers() {
                send_logged(ctx, peer, &sm);
            }
            *last = now;
            rec
        };
        let ut = rec.ut;
        record_put(ctx, agent.client_id, &put.key, &rec.v, (rec.ut, m as u64), None);
        let reply = match self.store.insert(&put.key, rec) {
            StorageStatus::Success => GrReply { status: true, put: Some(PutReply { ut }), ..Default::default() },
            _ => GrReply::default(),
        };
        reply_logged(ctx, &agent, &reply);
    }

    fn handle_get(&self, ctx: &dyn Context<Self>, agent: ReplyAgent, get: GetMessage) {
        self.update_gst(get.gst);
        let gst = self.gst();
        let mut result = Vec::new();
        let status = self.store.read(&get.key, |r| self.is_visible(r, gst), &mut result);
        let reply = match (status, result.first()) {
            (StorageStatus::Success, Some(rec)) => {
                let returned = Returned { value: &rec.v, rank: (rec.ut, rec.sr as u64), ut: rec.ut, sr: rec.sr };
                record_get(ctx, agent.client_id, &get.key, Some(returned), vec![gst]);
                GrReply {
                    status: true,
                    get: Some(GetReply { value: rec.v.clone(), ut: rec.ut, gst }),
                    ..Default::default()
                }
            }
            _ => {
                record_get(ctx, agent.client_id, &get.key, None, vec![gst]);
                GrReply::default()
            }
        };
        reply_logged(ctx, &agent, &reply);
    }

    pub fn heartbeat_round(&self, ctx: &dyn Context<Self>) {
        let ct = ctx.now_us();
        let mut last = self.put_lock.lock();
        if ct < *last + self.heartbeat_interval * 1000 {
            return;
        }
        let m = self.m();
        let time = self.raise_vv(m, ct);
        let sm = GrServerMessage::Heartbeat(HeartbeatMessage { dc_id: m, time });
        for peer in self.tree.placement.peers() {
            send_logged(ctx, peer, &sm);
        }
        *last = ct;
        self.heartbeats.fetch_add(1, AtomicOrdering::Relaxed);
    }

    pub fn gst_round(&self, ctx: &dyn Context<Self>) {
        let min_vv = self.tree.min_vector(self.vv());
        if self.tree.placement.is_root() {
            let new_gst = min_vv.iter().copied().min().unwrap_or(0);
            self.update_gst(new_gst);
            let sm = GrServerMessage::Gst(GstMessage { gst: self.gst() });
            for child in self.tree.child_nodes() {
                send_logged(ctx, child, &sm);
            }
        } else {
            let sm = GrServerMessage::Vv(VvMessage { p_id: self.tree.placement.node.partition, vv: min_vv });
            send_logged(ctx, self.tree.parent_node(), &sm);
        }
    }
}

impl Protocol for GentleRain {
    const NAME: &'static str = "gentlerain";
    type ServerMsg = GrServerMessage;
    type ClientMsg = GrClientMessage;
    type Reply = GrReply;
    type Client = GentleRainClient;

    fn build(config: &ServerConfig) -> Result<Self, ConfigError> {
        let placement = Placement::from_config(config)?;
        let props = &config.protocol_properties;
        let heartbeat_interval = props.first_or("heartbeat_interval", DEFAULT_HEARTBEAT_INTERVAL_MS)?;
        let gst_interval = props.first_or("gst_comutation_interval", DEFAULT_GST_INTERVAL_MS)?;
        let store = Storage::open(&config.storage, by_update_time).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let replicas = placement.shape.replicas as usize;
        Ok(GentleRain {
            tree: StableTree::new(placement),
            store,
            gst: AtomicU64::new(0),
            vv: (0..replicas).map(|_| AtomicU64::new(0)).collect(),
            heartbeat_interval,
            gst_interval,
            put_lock: Mutex::new(0),
            slept_ms: AtomicU64::new(0),
            heartbeats: AtomicU64::new(0),
        })
    }

    fn periodic_tasks(&self) -> Vec<PeriodicTask> {
        vec![
            PeriodicTask { id: HEARTBEAT_TASK, interval_ms: self.heartbeat_interval },
            PeriodicTask { id: GST_TASK, interval_ms: self.gst_interval },
        ]
    }

    fn handle_client(&self, ctx: &dyn Context<Self>, agent: ReplyAgent, msg: GrClientMessage) {
        match msg {
            GrClientMessage::Get(get) => self.handle_get(ctx, agent, get),
            GrClientMessage::Put(put) => self.handle_put(ctx, agent, put),
        }
    }

    fn handle_server(&self, ctx: &dyn Context<Self>, _from: NodeId, msg: GrServerMessage) {
        match msg {
            GrServerMessage::Replicate(ReplicateMessage { dc_id, key, rec: Some(rec) }) => {
                let ut = rec.ut;
                let value = rec.v.clone();
                if self.store.insert(&key, rec) == StorageStatus::Success {
                    record_applied(ctx, &key, &value);
                }
                self.raise_vv(dc_id, ut);
            }
            GrServerMessage::Replicate(_) => log::warn!("{}: replicate without record", ctx.node()),
            GrServerMessage::Heartbeat(hb) => {
                self.raise_vv(hb.dc_id, hb.time);
            }
            GrServerMessage::Vv(vv) => self.tree.set_child(vv.p_id, vv.vv),
            GrServerMessage::Gst(g) => {
                self.update_gst(g.gst);
                let sm = GrServerMessage::Gst(GstMessage { gst: self.gst() });
                for child in self.tree.child_nodes() {
                    send_logged(ctx, child, &sm);
                }
            }
        }
    }

    fn on_timer(&self, ctx: &dyn Context<Self>, task: u32) {
        match task {
            HEARTBEAT_TASK => self.heartbeat_round(ctx),
            GST_TASK => self.gst_round(ctx),
            other => log::warn!("{}: unknown task {other}", ctx.node()),
        }
    }

    fn store(&self) -> &dyn ReplicatedStore {
        &self.store
    }

    fn classify(msg: &GrClientMessage) -> OpKind {
        match msg {
            GrClientMessage::Get(_) => OpKind::Get,
            GrClientMessage::Put(_) => OpKind::Put,
        }
    }

    fn heads(&self) -> BTreeMap<String, Vec<u8>> {
        self.store.heads().into_iter().map(|(k, r)| (k, r.encode())).collect()
    }
}

pub struct GentleRainClient {
    setup: ClientSetup,
    pub dt: u64,
    pub gst: u64,
}

impl ProtocolClient for GentleRainClient {
    type Protocol = GentleRain;

    fn new(setup: ClientSetup) -> Self {
        GentleRainClient { setup, dt: 0, gst: 0 }
    }

    fn setup(&self) -> &ClientSetup {
        &self.setup
    }

    fn put_request(&mut self, key: &str, value: Vec<u8>) -> GrClientMessage {
        GrClientMessage::Put(PutMessage { key: key.to_string(), value, dt: self.dt })
    }

    fn put_complete(&mut self, reply: GrReply) -> Result<PutOutcome, ClientError> {
        match reply.put {
            Some(p) if reply.status => {
                self.dt = self.dt.max(p.ut);
                Ok(PutOutcome { meta: format!("ut={}", p.ut) })
            }
            _ if !reply.status => Err(ClientError::Failed),
            _ => Err(ClientError::UnexpectedReply),
        }
    }

    fn get_request(&mut self, key: &str) -> GrClientMessage {
        GrClientMessage::Get(GetMessage { key: key.to_string(), gst: self.gst })
    }

    fn get_complete(&mut self, reply: GrReply) -> Result<GetOutcome, ClientError> {
        match reply.get {
            Some(g) if reply.status => {
                self.gst = self.gst.max(g.gst);
                self.dt = self.dt.max(g.ut);
                Ok(GetOutcome { meta: format!("ut={} gst={}", g.ut, g.gst), value: Some(g.value) })
            }
            None if !reply.status => Ok(GetOutcome { value: None, meta: String::new() }),
            _ => Err(ClientError::UnexpectedReply),
        }
    }
}
