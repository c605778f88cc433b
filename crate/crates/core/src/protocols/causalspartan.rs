//! CausalSpartan: hybrid logical clock update times, so puts never wait on
//! clock skew, and a per-replica stable vector that gates each remote
//! replica's versions separately instead of one scalar stable time.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use parking_lot::Mutex;

use super::{merge_max, record_applied, record_get, record_put, reply_logged, send_logged, Placement, Returned, StableTree};
use crate::codec::Message;
use crate::config::{ConfigError, ServerConfig};
use crate::hlc::Hlc;
use crate::node::NodeId;
use crate::runtime::{
    ClientError, ClientSetup, Context, GetOutcome, OpKind, PeriodicTask, Protocol, ProtocolClient, PutOutcome, ReplyAgent,
};
use crate::storage::{ReplicatedStore, Storage, StorageStatus};

pub const HEARTBEAT_TASK: u32 = 1;
pub const DSV_TASK: u32 = 2;
pub const DEFAULT_HEARTBEAT_INTERVAL_MS: u64 = 10;
pub const DEFAULT_DSV_INTERVAL_MS: u64 = 5;

crate::message! {
    pub struct CsRecord {
        1 => pub k: String [required],
        2 => pub v: Vec<u8>,
        3 => pub ut: u64,
        4 => pub sr: u32,
        5 => pub dv: Vec<u64>,
    }
}

crate::message! {
    pub struct CsGet {
        1 => pub k: String [required],
        2 => pub ds: Vec<u64>,
    }
}

crate::message! {
    pub struct CsPut {
        1 => pub k: String [required],
        2 => pub v: Vec<u8>,
        3 => pub ds: Vec<u64>,
    }
}

crate::oneof! {
    pub enum CsClientMessage {
        1 => Get(CsGet),
        2 => Put(CsPut),
    }
}

crate::message! {
    pub struct CsGetReply {
        1 => pub v: Vec<u8>,
        2 => pub ut: u64,
        3 => pub sr: u32,
        4 => pub dsv: Vec<u64>,
        5 => pub dv: Vec<u64>,
    }
}

crate::message! {
    pub struct CsPutReply {
        1 => pub ut: u64,
    }
}

crate::message! {
    pub struct CsReply {
        1 => pub status: bool,
        2 => pub get: Option<CsGetReply>,
        3 => pub put: Option<CsPutReply>,
    }
}

crate::message! {
    pub struct CsReplicate {
        1 => pub rec: Option<CsRecord>,
    }
}

crate::message! {
    pub struct CsHeartbeat {
        1 => pub dc_id: u32,
        2 => pub hlc: u64,
    }
}

crate::message! {
    pub struct CsVv {
        1 => pub p_id: u32,
        2 => pub vv: Vec<u64>,
    }
}

crate::message! {
    pub struct CsDsv {
        1 => pub dsv: Vec<u64>,
    }
}

crate::oneof! {
    pub enum CsServerMessage {
        1 => Replicate(CsReplicate),
        2 => Heartbeat(CsHeartbeat),
        3 => Vv(CsVv),
        4 => Dsv(CsDsv),
    }
}

pub fn by_update_time(a: &CsRecord, b: &CsRecord) -> Ordering {
    (a.ut, a.sr, &a.v).cmp(&(b.ut, b.sr, &b.v))
}

struct ClockState {
    hlc: Hlc,
    last_send: u64,
}

pub struct CausalSpartan {
    tree: StableTree,
    store: Storage<CsRecord>,
    dsv: Mutex<Vec<u64>>,
    vv: Vec<AtomicU64>,
    heartbeat_interval: u64,
    dsv_interval: u64,
    clock: Mutex<ClockState>,
    slept_ms: AtomicU64,
    heartbeats: AtomicU64,
}

impl CausalSpartan {
    pub fn dsv(&self) -> Vec<u64> {
        self.dsv.lock().clone()
    }

    pub fn vv(&self) -> Vec<u64> {
        self.vv.iter().map(|v| v.load(AtomicOrdering::Acquire)).collect()
    }

    pub fn hlc(&self) -> Hlc {
        self.clock.lock().hlc
    }

    pub fn storage(&self) -> &Storage<CsRecord> {
        &self.store
    }

    /// Always zero; kept so skew experiments can compare against GentleRain.
    pub fn injected_sleep_ms(&self) -> u64 {
        self.slept_ms.load(AtomicOrdering::Relaxed)
    }

    pub fn heartbeats_sent(&self) -> u64 {
        self.heartbeats.load(AtomicOrdering::Relaxed)
    }

    fn m(&self) -> u32 {
        self.tree.placement.replica()
    }

    fn replicas(&self) -> usize {
        self.vv.len()
    }

    fn raise_vv(&self, replica: u32, t: u64) {
        match self.vv.get(replica as usize) {
            Some(slot) => {
                slot.fetch_max(t, AtomicOrdering::AcqRel);
            }
            None => log::warn!("replica {replica} out of range"),
        }
    }

    /// Raises the stable vector; the own-replica slot is left alone since a
    /// client's entry there records its writes, not stability.
    pub fn merge_dsv(&self, sample: &[u64], skip_own: bool) {
        let m = self.m() as usize;
        let mut dsv = self.dsv.lock();
        for (i, (slot, s)) in dsv.iter_mut().zip(sample).enumerate() {
            if !(skip_own && i == m) {
                *slot = (*slot).max(*s);
            }
        }
    }

    fn is_visible(&self, rec: &CsRecord, dsv: &[u64]) -> bool {
        let m = self.m();
        if rec.sr == m {
            return true;
        }
        let stable = |i: usize, t: u64| dsv.get(i).is_some_and(|d| t <= *d);
        stable(rec.sr as usize, rec.ut)
            && rec.dv.iter().enumerate().all(|(j, t)| j == m as usize || j == rec.sr as usize || stable(j, *t))
    }

    fn handle_put(&self, ctx: &dyn Context<Self>, agent: ReplyAgent, put: CsPut) {
        let m = self.m();
        let now = ctx.now_ms();
        let dep_max = Hlc::from_u64(put.ds.iter().copied().max().unwrap_or(0));
        let rec = {
            let mut clock = self.clock.lock();
            let next = if dep_max == Hlc::ZERO { clock.hlc.tick(now) } else { clock.hlc.merge(dep_max, now) };
            let ut = match next {
                Ok(t) => t,
                Err(e) => {
                    drop(clock);
                    log::error!("{}: {e}", ctx.node());
                    reply_logged(ctx, &agent, &CsReply::default());
                    return;
                }
            };
            clock.hlc = ut;
            self.raise_vv(m, ut.as_u64());
            let mut dv = put.ds.clone();
            dv.resize(self.replicas(), 0);
            let rec = CsRecord { k: put.k.clone(), v: put.v, ut: ut.as_u64(), sr: m, dv };
            let sm = CsServerMessage::Replicate(CsReplicate { rec: Some(rec.clone()) });
            for peer in self.tree.placement.peers() {
                send_logged(ctx, peer, &sm);
            }
            clock.last_send = now;
            rec
        };
        let ut = rec.ut;
        record_put(ctx, agent.client_id, &put.k, &rec.v, (rec.ut, m as u64), None);
        let reply = match self.store.insert(&put.k, rec) {
            StorageStatus::Success => CsReply { status: true, put: Some(CsPutReply { ut }), ..Default::default() },
            _ => CsReply::default(),
        };
        reply_logged(ctx, &agent, &reply);
    }

    fn handle_get(&self, ctx: &dyn Context<Self>, agent: ReplyAgent, get: CsGet) {
        self.merge_dsv(&get.ds, true);
        let dsv = self.dsv();
        let mut result = Vec::new();
        let status = self.store.read(&get.k, |r| self.is_visible(r, &dsv), &mut result);
        let reply = match (status, result.into_iter().next()) {
            (StorageStatus::Success, Some(rec)) => {
                let returned = Returned { value: &rec.v, rank: (rec.ut, rec.sr as u64), ut: rec.ut, sr: rec.sr };
                record_get(ctx, agent.client_id, &get.k, Some(returned), dsv.clone());
                CsReply {
                    status: true,
                    get: Some(CsGetReply { v: rec.v, ut: rec.ut, sr: rec.sr, dsv, dv: rec.dv }),
                    ..Default::default()
                }
            }
            _ => {
                record_get(ctx, agent.client_id, &get.k, None, dsv);
                CsReply::default()
            }
        };
        reply_logged(ctx, &agent, &reply);
    }

    pub fn heartbeat_round(&self, ctx: &dyn Context<Self>) {
        let ct = ctx.now_ms();
        let mut clock = self.clock.lock();
        if ct < clock.last_send + self.heartbeat_interval {
            return;
        }
        let Ok(t) = clock.hlc.tick(ct) else {
            log::error!("{}: clock counter exhausted", ctx.node());
            return;
        };
        clock.hlc = t;
        let m = self.m();
        self.raise_vv(m, t.as_u64());
        let sm = CsServerMessage::Heartbeat(CsHeartbeat { dc_id: m, hlc: t.as_u64() });
        for peer in self.tree.placement.peers() {
            send_logged(ctx, peer, &sm);
        }
        clock.last_send = ct;
        self.heartbeats.fetch_add(1, AtomicOrdering::Relaxed);
    }

    pub fn dsv_round(&self, ctx: &dyn Context<Self>) {
        let min_vv = self.tree.min_vector(self.vv());
        if self.tree.placement.is_root() {
            self.merge_dsv(&min_vv, false);
            let sm = CsServerMessage::Dsv(CsDsv { dsv: self.dsv() });
            for child in self.tree.child_nodes() {
                send_logged(ctx, child, &sm);
            }
        } else {
            let sm = CsServerMessage::Vv(CsVv { p_id: self.tree.placement.node.partition, vv: min_vv });
            send_logged(ctx, self.tree.parent_node(), &sm);
        }
    }
}

impl Protocol for CausalSpartan {
    const NAME: &'static str = "causalspartan";
    type ServerMsg = CsServerMessage;
    type ClientMsg = CsClientMessage;
    type Reply = CsReply;
    type Client = CausalSpartanClient;

    fn build(config: &ServerConfig) -> Result<Self, ConfigError> {
        let placement = Placement::from_config(config)?;
        let props = &config.protocol_properties;
        let heartbeat_interval = props.first_or("heartbeat_interval", DEFAULT_HEARTBEAT_INTERVAL_MS)?;
        let dsv_interval = props.first_or("gst_comutation_interval", DEFAULT_DSV_INTERVAL_MS)?;
        let store = Storage::open(&config.storage, by_update_time).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let replicas = placement.shape.replicas as usize;
        Ok(CausalSpartan {
            tree: StableTree::new(placement),
            store,
            dsv: Mutex::new(vec![0; replicas]),
            vv: (0..replicas).map(|_| AtomicU64::new(0)).collect(),
            heartbeat_interval,
            dsv_interval,
            clock: Mutex::new(ClockState { hlc: Hlc::ZERO, last_send: 0 }),
            slept_ms: AtomicU64::new(0),
            heartbeats: AtomicU64::new(0),
        })
    }

    fn periodic_tasks(&self) -> Vec<PeriodicTask> {
        vec![
            PeriodicTask { id: HEARTBEAT_TASK, interval_ms: self.heartbeat_interval },
            PeriodicTask { id: DSV_TASK, interval_ms: self.dsv_interval },
        ]
    }

    fn handle_client(&self, ctx: &dyn Context<Self>, agent: ReplyAgent, msg: CsClientMessage) {
        match msg {
            CsClientMessage::Get(get) => self.handle_get(ctx, agent, get),
            CsClientMessage::Put(put) => self.handle_put(ctx, agent, put),
        }
    }

    fn handle_server(&self, ctx: &dyn Context<Self>, _from: NodeId, msg: CsServerMessage) {
        match msg {
            CsServerMessage::Replicate(CsReplicate { rec: Some(rec) }) => {
                let (key, value, sr, ut) = (rec.k.clone(), rec.v.clone(), rec.sr, rec.ut);
                if self.store.insert(&key, rec) == StorageStatus::Success {
                    record_applied(ctx, &key, &value);
                }
                self.raise_vv(sr, ut);
            }
            CsServerMessage::Replicate(_) => log::warn!("{}: replicate without record", ctx.node()),
            CsServerMessage::Heartbeat(hb) => self.raise_vv(hb.dc_id, hb.hlc),
            CsServerMessage::Vv(vv) => self.tree.set_child(vv.p_id, vv.vv),
            CsServerMessage::Dsv(d) => {
                self.merge_dsv(&d.dsv, false);
                let sm = CsServerMessage::Dsv(CsDsv { dsv: self.dsv() });
                for child in self.tree.child_nodes() {
                    send_logged(ctx, child, &sm);
                }
            }
        }
    }

    fn on_timer(&self, ctx: &dyn Context<Self>, task: u32) {
        match task {
            HEARTBEAT_TASK => self.heartbeat_round(ctx),
            DSV_TASK => self.dsv_round(ctx),
            other => log::warn!("{}: unknown task {other}", ctx.node()),
        }
    }

    fn store(&self) -> &dyn ReplicatedStore {
        &self.store
    }

    fn classify(msg: &CsClientMessage) -> OpKind {
        match msg {
            CsClientMessage::Get(_) => OpKind::Get,
            CsClientMessage::Put(_) => OpKind::Put,
        }
    }

    fn heads(&self) -> BTreeMap<String, Vec<u8>> {
        self.store.heads().into_iter().map(|(k, r)| (k, r.encode())).collect()
    }
}

pub struct CausalSpartanClient {
    setup: ClientSetup,
    /// Replica id to the newest update time observed from it.
    pub ds: BTreeMap<u32, u64>,
    pub last_dsv: Vec<u64>,
}

impl CausalSpartanClient {
    fn ds_vector(&self) -> Vec<u64> {
        let mut v = vec![0; self.setup.shape.replicas as usize];
        for (r, t) in &self.ds {
            if let Some(slot) = v.get_mut(*r as usize) {
                *slot = *t;
            }
        }
        v
    }

    fn observe(&mut self, replica: u32, ut: u64) {
        if replica < self.setup.shape.replicas && ut > 0 {
            let e = self.ds.entry(replica).or_insert(0);
            *e = (*e).max(ut);
        }
    }
}

impl ProtocolClient for CausalSpartanClient {
    type Protocol = CausalSpartan;

    fn new(setup: ClientSetup) -> Self {
        CausalSpartanClient { setup, ds: BTreeMap::new(), last_dsv: Vec::new() }
    }

    fn setup(&self) -> &ClientSetup {
        &self.setup
    }

    fn put_request(&mut self, key: &str, value: Vec<u8>) -> CsClientMessage {
        CsClientMessage::Put(CsPut { k: key.to_string(), v: value, ds: self.ds_vector() })
    }

    fn put_complete(&mut self, reply: CsReply) -> Result<PutOutcome, ClientError> {
        match reply.put {
            Some(p) if reply.status => {
                self.observe(self.setup.replica, p.ut);
                Ok(PutOutcome { meta: format!("ut={}", Hlc::from_u64(p.ut)) })
            }
            _ if !reply.status => Err(ClientError::Failed),
            _ => Err(ClientError::UnexpectedReply),
        }
    }

    fn get_request(&mut self, key: &str) -> CsClientMessage {
        CsClientMessage::Get(CsGet { k: key.to_string(), ds: self.ds_vector() })
    }

    fn get_complete(&mut self, reply: CsReply) -> Result<GetOutcome, ClientError> {
        match reply.get {
            Some(g) if reply.status => {
                self.observe(g.sr, g.ut);
                for (j, t) in g.dv.iter().enumerate() {
                    self.observe(j as u32, *t);
                }
                if self.last_dsv.len() < g.dsv.len() {
                    self.last_dsv.resize(g.dsv.len(), 0);
                }
                merge_max(&mut self.last_dsv, &g.dsv);
                let dsv: Vec<String> = g.dsv.iter().map(|t| Hlc::from_u64(*t).to_string()).collect();
                Ok(GetOutcome {
                    meta: format!("ut={} sr={} dsv=[{}]", Hlc::from_u64(g.ut), g.sr, dsv.join(",")),
                    value: Some(g.v),
                })
            }
            None if !reply.status => Ok(GetOutcome { value: None, meta: String::new() }),
            _ => Err(ClientError::UnexpectedReply),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::{ClusterShape, TreeShape};
    use crate::runtime::mock::MockContext;
    use rand::{Rng, SeedableRng};

    fn h(l: u64, c: u32) -> u64 {
        Hlc::new(l, c).unwrap().as_u64()
    }

    fn server(node: NodeId, shape: ClusterShape) -> CausalSpartan {
        CausalSpartan::build(&ServerConfig::for_cluster(node, shape, TreeShape::Star)).unwrap()
    }

    fn put(k: &str, ds: Vec<u64>) -> CsClientMessage {
        CsClientMessage::Put(CsPut { k: k.into(), v: vec![1], ds })
    }

    fn get(k: &str) -> CsClientMessage {
        CsClientMessage::Get(CsGet { k: k.into(), ds: vec![] })
    }

    fn remote(k: &str, ut: u64, sr: u32, dv: Vec<u64>) -> CsServerMessage {
        CsServerMessage::Replicate(CsReplicate { rec: Some(CsRecord { k: k.into(), v: vec![sr as u8], ut, sr, dv }) })
    }

    #[test]
    fn put_never_waits_for_dependencies() {
        let s = server(NodeId::new(0, 0), ClusterShape::new(2, 1));
        let ctx = MockContext::new(NodeId::new(0, 0), 100);
        s.handle_client(&ctx, ctx.agent(1), put("k", vec![0, h(150, 3)]));
        assert!(ctx.take_deferred().is_empty());
        let ut = Hlc::from_u64(ctx.only_reply().put.unwrap().ut);
        assert_eq!((ut.l(), ut.c()), (150, 4));
        assert_eq!(s.injected_sleep_ms(), 0);
        assert_eq!(s.vv()[0], ut.as_u64());
    }

    #[test]
    fn empty_dependencies_tick() {
        let s = server(NodeId::new(0, 0), ClusterShape::new(2, 1));
        let ctx = MockContext::new(NodeId::new(0, 0), 100);
        s.handle_client(&ctx, ctx.agent(1), put("k", vec![]));
        assert_eq!(ctx.only_reply().put.unwrap().ut, h(100, 0));
        s.handle_client(&ctx, ctx.agent(1), put("k", vec![]));
        assert_eq!(ctx.only_reply().put.unwrap().ut, h(100, 1));
        let sent = ctx.take_sent();
        assert_eq!(sent.len(), 2);
        assert_eq!(sent[0].0, NodeId::new(1, 0));
    }

    #[test]
    fn remote_visibility_follows_stable_vector() {
        let s = server(NodeId::new(0, 0), ClusterShape::new(3, 1));
        let ctx = MockContext::new(NodeId::new(0, 0), 0);
        s.handle_server(&ctx, NodeId::new(1, 0), remote("k", h(40, 0), 1, vec![]));
        s.handle_client(&ctx, ctx.agent(1), get("k"));
        assert!(!ctx.only_reply().status);
        s.merge_dsv(&[0, h(50, 0), 0], false);
        s.handle_client(&ctx, ctx.agent(1), get("k"));
        assert_eq!(ctx.only_reply().get.unwrap().ut, h(40, 0));
    }

    /// A lagging third replica holds its own slot low but does not block
    /// replica 1's versions, which a scalar stable time would.
    #[test]
    fn slow_replica_does_not_block_others() {
        let s = server(NodeId::new(0, 0), ClusterShape::new(3, 1));
        let ctx = MockContext::new(NodeId::new(0, 0), 0);
        s.handle_server(&ctx, NodeId::new(1, 0), remote("k", h(90, 0), 1, vec![]));
        s.merge_dsv(&[h(100, 0), h(100, 0), h(5, 0)], false);
        let scalar = s.dsv().into_iter().min().unwrap();
        assert!(h(90, 0) > scalar);
        s.handle_client(&ctx, ctx.agent(1), get("k"));
        assert_eq!(ctx.only_reply().get.unwrap().ut, h(90, 0));
    }

    #[test]
    fn dependency_on_unstable_replica_hides_version() {
        let s = server(NodeId::new(0, 0), ClusterShape::new(3, 1));
        let ctx = MockContext::new(NodeId::new(0, 0), 0);
        s.handle_server(&ctx, NodeId::new(1, 0), remote("k", h(90, 0), 1, vec![0, 0, h(60, 0)]));
        s.merge_dsv(&[0, h(100, 0), h(50, 0)], false);
        s.handle_client(&ctx, ctx.agent(1), get("k"));
        assert!(!ctx.only_reply().status);
        s.merge_dsv(&[0, 0, h(60, 0)], false);
        s.handle_client(&ctx, ctx.agent(1), get("k"));
        assert!(ctx.only_reply().status);
    }

    #[test]
    fn local_version_always_visible() {
        let s = server(NodeId::new(0, 0), ClusterShape::new(2, 1));
        let ctx = MockContext::new(NodeId::new(0, 0), 500);
        s.handle_client(&ctx, ctx.agent(1), put("k", vec![]));
        ctx.take_replies();
        s.handle_client(&ctx, ctx.agent(1), get("k"));
        assert_eq!(ctx.only_reply().get.unwrap().sr, 0);
    }

    #[test]
    fn root_takes_elementwise_min() {
        let s = server(NodeId::new(0, 0), ClusterShape::new(2, 2));
        let ctx = MockContext::new(NodeId::new(0, 0), 0);
        s.raise_vv(0, h(10, 1));
        s.raise_vv(1, h(20, 0));
        s.handle_server(&ctx, NodeId::new(0, 1), CsServerMessage::Vv(CsVv { p_id: 1, vv: vec![h(8, 4), h(25, 0)] }));
        s.dsv_round(&ctx);
        let dsv: Vec<u64> = s.dsv().iter().map(|t| Hlc::from_u64(*t).l()).collect();
        assert_eq!(dsv, vec![8, 20]);
        assert_eq!(ctx.take_sent().len(), 1);

        let single = server(NodeId::new(0, 0), ClusterShape::new(2, 1));
        single.raise_vv(0, h(3, 0));
        single.raise_vv(1, h(7, 0));
        single.dsv_round(&ctx);
        assert_eq!(single.dsv(), single.vv());
    }

    #[test]
    fn random_rounds_match_offline_min() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let shape = ClusterShape::new(3, 4);
        for _ in 0..20 {
            let servers: Vec<CausalSpartan> = (0..4).map(|p| server(NodeId::new(0, p), shape)).collect();
            let ctx = MockContext::new(NodeId::new(0, 0), 0);
            let mut expected = vec![u64::MAX; 3];
            for s in &servers {
                for r in 0..3u32 {
                    let t = h(rng.random_range(1..1000), 0);
                    s.raise_vv(r, t);
                    expected[r as usize] = expected[r as usize].min(t);
                }
            }
            for _ in 0..2 {
                for s in &servers[1..] {
                    s.dsv_round(&ctx);
                }
                for (to, msg) in ctx.take_sent() {
                    servers[to.partition as usize].handle_server(&ctx, NodeId::new(0, 1), msg);
                }
                servers[0].dsv_round(&ctx);
                for (to, msg) in ctx.take_sent() {
                    servers[to.partition as usize].handle_server(&ctx, NodeId::new(0, 0), msg);
                }
            }
            for s in &servers {
                assert_eq!(s.dsv(), expected);
            }
        }
    }

    #[test]
    fn client_ds_tracks_observed_replicas() {
        let mut c = CausalSpartanClient::new(ClientSetup { client_id: 1, replica: 0, shape: ClusterShape::new(2, 1) });
        c.put_complete(CsReply { status: true, put: Some(CsPutReply { ut: h(5, 0) }), get: None }).unwrap();
        assert_eq!(c.ds, BTreeMap::from([(0, h(5, 0))]));
        let g = CsGetReply { v: vec![], ut: h(9, 0), sr: 1, dsv: vec![h(1, 0), h(9, 0)], dv: vec![h(4, 0), 0] };
        c.get_complete(CsReply { status: true, get: Some(g), put: None }).unwrap();
        assert_eq!(c.ds, BTreeMap::from([(0, h(5, 0)), (1, h(9, 0))]));
        let g = CsGetReply { v: vec![], ut: h(9, 0), sr: 7, dsv: vec![], dv: vec![0, 0, 0, h(1, 0)] };
        c.get_complete(CsReply { status: true, get: Some(g), put: None }).unwrap();
        assert!(c.ds.len() <= 2);
        match c.put_request("k", vec![]) {
            CsClientMessage::Put(p) => assert_eq!(p.ds, vec![h(5, 0), h(9, 0)]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn heartbeat_ticks_clock() {
        let s = server(NodeId::new(0, 0), ClusterShape::new(2, 1));
        let ctx = MockContext::new(NodeId::new(0, 0), 20);
        s.heartbeat_round(&ctx);
        assert_eq!(s.vv()[0], h(20, 0));
        ctx.now.set(25);
        s.heartbeat_round(&ctx);
        assert_eq!(s.heartbeats_sent(), 1);
        match &ctx.take_sent()[..] {
            [(to, CsServerMessage::Heartbeat(hb))] => {
                assert_eq!(*to, NodeId::new(1, 0));
                assert_eq!(hb.hlc, h(20, 0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schemas_validate() {
        CsClientMessage::schema().validate_deep().unwrap();
        CsServerMessage::schema().validate_deep().unwrap();
        CsReply::schema().validate_deep().unwrap();
    }
}
