//! Seeded discrete-event simulator hosting unmodified protocol code.
//!
//! Time is simulated in nanoseconds. Every node is a single CPU: handlers run
//! one at a time and each costs `base + per_byte * bytes` of simulated time,
//! after which its sends and replies leave the node. Server links are FIFO
//! with uniformly distributed delays and may be taken down in scheduled
//! windows; the reliable channel layer from [`crate::runtime::channel`]
//! recovers lost frames by resending. Client sessions are closed loops that
//! drive a [`ProtocolClient`].
//!
//! With equal seed, configuration and sessions two runs produce identical
//! traces.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{write_frame, Message};
use crate::config::{ReplicationMode, ServerConfig, DEFAULT_QUEUE_CAPACITY, DEFAULT_RESEND_INTERVAL_MS};
use crate::history::{History, HistoryEvent};
use crate::node::{ClusterShape, NodeId, TreeShape};
use crate::runtime::envelope::{ServerFrame, StorageFrame};
use crate::runtime::{
    Accept, ClientSetup, Context, Envelope, InboundChannel, OpKind, OutboundChannel, Protocol, ProtocolClient, ReplyAgent,
    ReplyError, SendError,
};

/// Offset added to simulated node clocks so they look like Unix time.
pub const CLOCK_EPOCH_MS: u64 = 1_700_000_000_000;
const NS_PER_MS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("node {0} registered twice")]
    DuplicateNode(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("replica {0} has no nodes")]
    UnknownReplica(u32),
    #[error("building {node}: {reason}")]
    Build { node: NodeId, reason: String },
    #[error("send failed: {0}")]
    Send(#[from] SendError),
}

/// Uniform delay in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delay {
    pub min_ms: f64,
    pub max_ms: f64,
}

impl Delay {
    pub const ZERO: Delay = Delay { min_ms: 0.0, max_ms: 0.0 };

    pub fn uniform(min_ms: f64, max_ms: f64) -> Self {
        Delay { min_ms, max_ms }
    }

    pub fn fixed(ms: f64) -> Self {
        Delay { min_ms: ms, max_ms: ms }
    }

    fn sample_ns(&self, rng: &mut ChaCha8Rng) -> u64 {
        let ms = if self.max_ms > self.min_ms { rng.random_range(self.min_ms..=self.max_ms) } else { self.min_ms };
        (ms.max(0.0) * NS_PER_MS as f64) as u64
    }
}

/// Window during which the link between `a` and `b` drops every frame in
/// both directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outage {
    pub a: NodeId,
    pub b: NodeId,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl Outage {
    fn covers(&self, x: NodeId, y: NodeId, t_ns: u64) -> bool {
        let on_link = (self.a == x && self.b == y) || (self.a == y && self.b == x);
        on_link && t_ns >= self.start_ms * NS_PER_MS && t_ns < self.end_ms * NS_PER_MS
    }
}

/// CPU cost of one handler invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceModel {
    pub base_us: u64,
    /// Charged for every byte received and sent by the handler.
    pub per_byte_ns: u64,
}

impl ServiceModel {
    pub const FREE: ServiceModel = ServiceModel { base_us: 0, per_byte_ns: 0 };

    fn cost_ns(&self, bytes: usize) -> u64 {
        self.base_us * 1_000 + self.per_byte_ns * bytes as u64
    }
}

impl Default for ServiceModel {
    fn default() -> Self {
        ServiceModel { base_us: 20, per_byte_ns: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub server_link: Delay,
    pub client_link: Delay,
    pub link_overrides: BTreeMap<(NodeId, NodeId), Delay>,
    pub outages: Vec<Outage>,
    pub service: ServiceModel,
    pub clock_skew_ms: BTreeMap<NodeId, i64>,
    pub queue_capacity: usize,
    pub resend_interval_ms: u64,
    pub client_timeout_ms: u64,
    pub record_history: bool,
    pub record_trace: bool,
    pub max_steps: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            server_link: Delay::uniform(0.0, 50.0),
            client_link: Delay::uniform(0.1, 0.5),
            link_overrides: BTreeMap::new(),
            outages: Vec::new(),
            service: ServiceModel::default(),
            clock_skew_ms: BTreeMap::new(),
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            resend_interval_ms: DEFAULT_RESEND_INTERVAL_MS,
            client_timeout_ms: crate::config::DEFAULT_CLIENT_TIMEOUT_MS,
            record_history: false,
            record_trace: false,
            max_steps: 50_000_000,
        }
    }
}

impl SimConfig {
    pub fn seeded(seed: u64) -> Self {
        SimConfig { seed, ..Default::default() }
    }
}

/// One step of a session operation.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Get(String),
    Put(String, Vec<u8>),
}

impl Step {
    pub fn key(&self) -> &str {
        match self {
            Step::Get(k) | Step::Put(k, _) => k,
        }
    }
}

/// A client-visible operation; amplified inserts have several steps that run
/// sequentially and count as one operation.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOp {
    pub kind: OpKind,
    pub steps: Vec<Step>,
}

impl SessionOp {
    pub fn get(key: impl Into<String>) -> Self {
        SessionOp { kind: OpKind::Get, steps: vec![Step::Get(key.into())] }
    }

    pub fn put(key: impl Into<String>, value: Vec<u8>) -> Self {
        SessionOp { kind: OpKind::Put, steps: vec![Step::Put(key.into(), value)] }
    }

    pub fn amplified(puts: Vec<(String, Vec<u8>)>) -> Self {
        SessionOp { kind: OpKind::Put, steps: puts.into_iter().map(|(k, v)| Step::Put(k, v)).collect() }
    }
}

/// Supplies a session's operations in order.
pub trait OpSource {
    fn next_op(&mut self) -> Option<SessionOp>;
}

impl<I: Iterator<Item = SessionOp>> OpSource for I {
    fn next_op(&mut self) -> Option<SessionOp> {
        self.next()
    }
}

/// Completed client operation.
#[derive(Debug, Clone, PartialEq)]
pub struct OpRecord {
    pub session: u64,
    pub replica: u32,
    pub kind: OpKind,
    pub key: String,
    pub node: NodeId,
    pub start_ns: u64,
    pub latency_ns: u64,
    pub ok: bool,
    /// Requests issued for this operation.
    pub steps: u32,
    /// Dependencies carried by the operation's put requests.
    pub deps: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimStats {
    pub steps: u64,
    /// Client requests received by servers, by class.
    pub client_requests: BTreeMap<OpKind, u64>,
    /// Server messages delivered to handlers, by message member name.
    pub server_messages: BTreeMap<String, u64>,
    pub storage_frames: u64,
    pub frames_sent: u64,
    pub frames_dropped: u64,
    pub retransmissions: u64,
    pub queue_full: u64,
    pub deferrals: u64,
    pub deferred_ms: u64,
    pub decode_errors: u64,
    pub handler_panics: u64,
    pub client_timeouts: u64,
    pub timer_runs: u64,
}

crate::message! {
    /// One line of the delivery trace.
    pub struct TraceEvent {
        1 => pub t_ns: u64,
        2 => pub kind: String,
        3 => pub node: String,
        4 => pub peer: String,
        5 => pub seq: u64,
        6 => pub len: u64,
        7 => pub digest: u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOutcome {
    pub steps: u64,
    /// False when the step budget ran out with work pending.
    pub quiescent: bool,
    pub now_ms: u64,
}

enum Work<P: Protocol> {
    Client { session: u64, request_id: u64, payload: Vec<u8> },
    Deferred { agent: ReplyAgent, msg: P::ClientMsg },
    Server { from: usize, envelope: Vec<u8> },
    Timer { task: u32 },
}

enum Event<P: Protocol> {
    /// `fg` marks work caused, directly or through messages, by a client
    /// request; only such work keeps the simulation busy.
    Inbox { node: usize, work: Work<P>, fg: bool },
    Exec { node: usize },
    Frame { src: usize, dst: usize, seq: u64, bytes: Vec<u8> },
    Ack { src: usize, dst: usize, seq: u64 },
    Resend { src: usize, dst: usize },
    Timer { node: usize, task: u32, interval_ns: u64 },
    Reply { session: u64, request_id: u64, payload: Vec<u8> },
    ClientTimeout { session: u64, request_id: u64 },
    SessionStart { session: u64 },
}

struct Link {
    out: OutboundChannel,
    inbound: InboundChannel,
    resend_armed: bool,
    /// Last transmission time of each unacked frame.
    sent_ns: BTreeMap<u64, u64>,
    /// Unacked frames carrying foreground work.
    fg: BTreeSet<u64>,
    last_arrival_ns: u64,
    reverse_last_arrival_ns: u64,
}

struct SimNode<P: Protocol> {
    id: NodeId,
    config: ServerConfig,
    protocol: P,
    inbox: VecDeque<(Work<P>, bool)>,
    busy_until: u64,
    exec_scheduled: bool,
    disabled: BTreeSet<u32>,
}

struct Session<P: Protocol> {
    client: P::Client,
    source: Box<dyn OpSource>,
    current: Option<Current>,
    next_request: u64,
    done: bool,
}

struct Current {
    kind: OpKind,
    steps: VecDeque<Step>,
    key: String,
    node: NodeId,
    start_ns: u64,
    issued: u32,
    deps: u64,
    pending: Option<(u64, OpKind)>,
}

enum Output<P: Protocol> {
    Transmit { dst: usize, seq: u64, bytes: Vec<u8> },
    Reply { session: u64, request_id: u64, payload: Vec<u8> },
    Defer { agent: ReplyAgent, msg: P::ClientMsg, delay_ms: u64 },
}

struct SimCtx<'a, P: Protocol> {
    node: NodeId,
    idx: usize,
    now_us: u64,
    index: &'a BTreeMap<NodeId, usize>,
    links: &'a RefCell<BTreeMap<(usize, usize), Link>>,
    history: &'a RefCell<History>,
    recording: bool,
    outputs: RefCell<Vec<Output<P>>>,
    out_bytes: RefCell<usize>,
    queue_full: RefCell<u64>,
}

impl<P: Protocol> SimCtx<'_, P> {
    fn enqueue(&self, dest: NodeId, build: impl FnOnce(u64) -> Envelope) -> Result<(), SendError> {
        let dst = *self.index.get(&dest).ok_or(SendError::UnknownDestination(dest))?;
        let mut links = self.links.borrow_mut();
        let link = links.get_mut(&(self.idx, dst)).ok_or(SendError::UnknownDestination(dest))?;
        let mut bytes = Vec::new();
        let seq = link
            .out
            .enqueue(|seq| {
                bytes = build(seq).encode();
                bytes.clone()
            })
            .inspect_err(|_| *self.queue_full.borrow_mut() += 1)?;
        *self.out_bytes.borrow_mut() += bytes.len();
        self.outputs.borrow_mut().push(Output::Transmit { dst, seq, bytes });
        Ok(())
    }
}

impl<P: Protocol> Context<P> for SimCtx<'_, P> {
    fn node(&self) -> NodeId {
        self.node
    }

    fn now_ms(&self) -> u64 {
        self.now_us / 1000
    }

    fn now_us(&self) -> u64 {
        self.now_us
    }

    fn send_to_server(&self, dest: NodeId, msg: &P::ServerMsg) -> Result<(), SendError> {
        let payload = msg.encode();
        let source = self.node.to_string();
        self.enqueue(dest, |seq| Envelope::Server(ServerFrame { seq, source, payload }))
    }

    fn send_reply(&self, agent: &ReplyAgent, reply: &P::Reply) -> Result<(), ReplyError> {
        agent.claim()?;
        let payload = reply.encode();
        *self.out_bytes.borrow_mut() += payload.len();
        self.outputs.borrow_mut().push(Output::Reply { session: agent.client_id, request_id: agent.request_id, payload });
        Ok(())
    }

    fn defer(&self, agent: ReplyAgent, msg: P::ClientMsg, delay_ms: u64) {
        self.outputs.borrow_mut().push(Output::Defer { agent, msg, delay_ms });
    }

    fn recording(&self) -> bool {
        self.recording
    }

    fn record(&self, event: HistoryEvent) {
        if self.recording {
            self.history.borrow_mut().push(event);
        }
    }
}

pub struct Sim<P: Protocol> {
    cfg: SimConfig,
    rng: ChaCha8Rng,
    now_ns: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: BTreeMap<u64, Event<P>>,
    /// Foreground frames and work items not yet handled.
    pending_fg: u64,
    index: BTreeMap<NodeId, usize>,
    nodes: Vec<SimNode<P>>,
    links: RefCell<BTreeMap<(usize, usize), Link>>,
    sessions: BTreeMap<u64, Session<P>>,
    active_sessions: usize,
    replica_shape: Option<ClusterShape>,
    history: RefCell<History>,
    trace: Vec<TraceEvent>,
    ops: Vec<OpRecord>,
    stats: SimStats,
}

impl<P: Protocol> Sim<P> {
    pub fn new(cfg: SimConfig) -> Self {
        Sim {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            now_ns: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            pending_fg: 0,
            index: BTreeMap::new(),
            nodes: Vec::new(),
            links: RefCell::new(BTreeMap::new()),
            sessions: BTreeMap::new(),
            active_sessions: 0,
            replica_shape: None,
            history: RefCell::new(History::default()),
            trace: Vec::new(),
            ops: Vec::new(),
            stats: SimStats::default(),
        }
    }

    /// Every node of an `R x P` cluster, built from default configs passed
    /// through `adjust`.
    pub fn cluster(
        cfg: SimConfig,
        shape: ClusterShape,
        tree: TreeShape,
        mut adjust: impl FnMut(&mut ServerConfig),
    ) -> Result<Self, SimError> {
        let mut sim = Sim::new(cfg);
        for node in shape.nodes().collect::<Vec<_>>() {
            let mut config = ServerConfig::for_cluster(node, shape, tree);
            adjust(&mut config);
            sim.add_node(config)?;
        }
        Ok(sim)
    }

    pub fn add_node(&mut self, config: ServerConfig) -> Result<(), SimError> {
        let id = config.node;
        if self.index.contains_key(&id) {
            return Err(SimError::DuplicateNode(id));
        }
        let protocol = P::build(&config).map_err(|e| SimError::Build { node: id, reason: e.to_string() })?;
        self.add_node_with(config, protocol)
    }

    pub fn add_node_with(&mut self, mut config: ServerConfig, protocol: P) -> Result<(), SimError> {
        let id = config.node;
        if self.index.contains_key(&id) {
            return Err(SimError::DuplicateNode(id));
        }
        config.queue_capacity = self.cfg.queue_capacity;
        config.resend_interval_ms = self.cfg.resend_interval_ms;
        let idx = self.nodes.len();
        let tasks = protocol.periodic_tasks();
        {
            let mut links = self.links.borrow_mut();
            for (other_id, other) in &self.index {
                for (a, b, dest) in [(idx, *other, *other_id), (*other, idx, id)] {
                    links.insert(
                        (a, b),
                        Link {
                            out: OutboundChannel::new(dest, self.cfg.queue_capacity, self.cfg.resend_interval_ms),
                            inbound: InboundChannel::default(),
                            resend_armed: false,
                            sent_ns: BTreeMap::new(),
                            fg: BTreeSet::new(),
                            last_arrival_ns: 0,
                            reverse_last_arrival_ns: 0,
                        },
                    );
                }
            }
        }
        self.index.insert(id, idx);
        self.nodes.push(SimNode {
            id,
            config,
            protocol,
            inbox: VecDeque::new(),
            busy_until: 0,
            exec_scheduled: false,
            disabled: BTreeSet::new(),
        });
        // Random phase so nodes' rounds do not run in lockstep.
        for task in tasks {
            let interval_ns = task.interval_ms.max(1) * NS_PER_MS;
            let phase = self.rng.random_range(0..interval_ns);
            self.schedule(self.now_ns + phase, Event::Timer { node: idx, task: task.id, interval_ns });
        }
        let shape = self.nodes[idx].config.shape().unwrap_or(ClusterShape::new(1, 1));
        self.replica_shape.get_or_insert(shape);
        Ok(())
    }

    /// Adds a closed-loop client session attached to `replica`; returns its
    /// id, which is also the client id seen by servers.
    pub fn add_session(&mut self, replica: u32, source: impl OpSource + 'static) -> Result<u64, SimError> {
        self.add_session_at(replica, 0, source)
    }

    pub fn add_session_at(&mut self, replica: u32, start_ms: u64, source: impl OpSource + 'static) -> Result<u64, SimError> {
        let shape = self.replica_shape.ok_or(SimError::UnknownReplica(replica))?;
        if replica >= shape.replicas {
            return Err(SimError::UnknownReplica(replica));
        }
        let id = self.sessions.len() as u64;
        let client = P::Client::new(ClientSetup { client_id: id, replica, shape });
        self.sessions.insert(id, Session { client, source: Box::new(source), current: None, next_request: 0, done: false });
        self.active_sessions += 1;
        let at = self.now_ns.max(start_ms * NS_PER_MS);
        self.schedule(at, Event::SessionStart { session: id });
        Ok(id)
    }

    pub fn node(&self, id: NodeId) -> Option<&P> {
        self.index.get(&id).map(|i| &self.nodes[*i].protocol)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn client(&self, session: u64) -> Option<&P::Client> {
        self.sessions.get(&session).map(|s| &s.client)
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ns / NS_PER_MS
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns
    }

    /// Wall clock of `id` at the current simulated instant.
    pub fn clock_ms(&self, id: NodeId) -> u64 {
        self.node_clock(id, self.now_ns)
    }

    fn node_clock(&self, id: NodeId, t_ns: u64) -> u64 {
        self.node_clock_us(id, t_ns) / 1000
    }

    fn node_clock_us(&self, id: NodeId, t_ns: u64) -> u64 {
        let skew = self.cfg.clock_skew_ms.get(&id).copied().unwrap_or(0);
        ((t_ns / 1000) as i64 + (CLOCK_EPOCH_MS as i64 + skew) * 1000).max(0) as u64
    }

    pub fn history(&self) -> History {
        self.history.borrow().clone()
    }

    pub fn take_history(&mut self) -> History {
        self.history.take()
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    /// Length-prefixed encoding of the trace.
    pub fn trace_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for ev in &self.trace {
            write_frame(&ev.encode(), &mut out);
        }
        out
    }

    pub fn ops(&self) -> &[OpRecord] {
        &self.ops
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    /// Winning encoded record per key at every node.
    pub fn heads(&self) -> BTreeMap<NodeId, BTreeMap<String, Vec<u8>>> {
        self.nodes.iter().map(|n| (n.id, n.protocol.heads())).collect()
    }

    /// Unacknowledged frames on the channel from `src` to `dst`.
    pub fn queue_depth(&self, src: NodeId, dst: NodeId) -> usize {
        match (self.index.get(&src), self.index.get(&dst)) {
            (Some(a), Some(b)) => self.links.borrow().get(&(*a, *b)).map_or(0, |l| l.out.len()),
            _ => 0,
        }
    }

    /// Stops scheduling periodic `task` at `node`.
    pub fn disable_task(&mut self, node: NodeId, task: u32) -> Result<(), SimError> {
        let idx = *self.index.get(&node).ok_or(SimError::UnknownNode(node))?;
        self.nodes[idx].disabled.insert(task);
        Ok(())
    }

    pub fn disable_task_everywhere(&mut self, task: u32) {
        for n in &mut self.nodes {
            n.disabled.insert(task);
        }
    }

    /// Runs periodic `task` at `node` once, now, even if disabled.
    pub fn fire_timer(&mut self, node: NodeId, task: u32) -> Result<(), SimError> {
        let idx = *self.index.get(&node).ok_or(SimError::UnknownNode(node))?;
        self.schedule(self.now_ns, Event::Inbox { node: idx, work: Work::Timer { task }, fg: true });
        Ok(())
    }

    /// Sends `msg` from `from` to `to` over the reliable channel as if a
    /// handler at `from` had sent it.
    pub fn inject_server_message(&mut self, from: NodeId, to: NodeId, msg: &P::ServerMsg) -> Result<u64, SimError> {
        let src = *self.index.get(&from).ok_or(SimError::UnknownNode(from))?;
        let dst = *self.index.get(&to).ok_or(SimError::UnknownNode(to))?;
        let payload = msg.encode();
        let source = from.to_string();
        let (seq, bytes) = {
            let mut links = self.links.borrow_mut();
            let link = links.get_mut(&(src, dst)).ok_or(SendError::UnknownDestination(to))?;
            let mut bytes = Vec::new();
            let seq = link
                .out
                .enqueue(|seq| {
                    bytes = Envelope::Server(ServerFrame { seq, source, payload }).encode();
                    bytes.clone()
                })
                .inspect_err(|_| self.stats.queue_full += 1)?;
            (seq, bytes)
        };
        self.transmit(src, dst, seq, bytes, self.now_ns, true);
        Ok(seq)
    }

    fn schedule(&mut self, at: u64, ev: Event<P>) {
        if let Event::Inbox { fg: true, .. } = ev {
            self.pending_fg += 1;
        }
        let id = self.seq;
        self.seq += 1;
        self.queue.push(Reverse((at, id)));
        self.events.insert(id, ev);
    }

    fn busy(&self) -> bool {
        self.pending_fg > 0 || self.active_sessions > 0
    }

    /// Runs until every session has finished and all work caused by client
    /// requests has been handled. Periodic timers and the messages they send
    /// do not keep it running.
    pub fn run_until_quiescent(&mut self) -> RunOutcome {
        let start = self.stats.steps;
        while self.busy() {
            if self.stats.steps - start >= self.cfg.max_steps || !self.step(u64::MAX) {
                break;
            }
        }
        RunOutcome { steps: self.stats.steps - start, quiescent: !self.busy(), now_ms: self.now_ms() }
    }

    /// Runs every event up to simulated time `t_ms`, timers included.
    pub fn run_until(&mut self, t_ms: u64) -> RunOutcome {
        let limit = t_ms.saturating_mul(NS_PER_MS);
        let start = self.stats.steps;
        while self.stats.steps - start < self.cfg.max_steps && self.step(limit) {}
        self.now_ns = self.now_ns.max(limit);
        RunOutcome { steps: self.stats.steps - start, quiescent: !self.busy(), now_ms: self.now_ms() }
    }

    pub fn run_for(&mut self, ms: u64) -> RunOutcome {
        self.run_until(self.now_ms() + ms)
    }

    /// Processes the next event at or before `limit`; false if none.
    fn step(&mut self, limit: u64) -> bool {
        let Some(Reverse((at, id))) = self.queue.peek().copied() else { return false };
        if at > limit {
            return false;
        }
        self.queue.pop();
        let ev = self.events.remove(&id).expect("scheduled event");
        self.now_ns = self.now_ns.max(at);
        self.stats.steps += 1;
        self.dispatch(ev);
        true
    }

    fn dispatch(&mut self, ev: Event<P>) {
        match ev {
            Event::Inbox { node, work, fg } => {
                self.nodes[node].inbox.push_back((work, fg));
                self.wake(node);
            }
            Event::Exec { node } => self.exec(node),
            Event::Frame { src, dst, seq, bytes } => self.on_frame(src, dst, seq, bytes),
            Event::Ack { src, dst, seq } => {
                if let Some(link) = self.links.borrow_mut().get_mut(&(src, dst)) {
                    link.out.ack(seq);
                    link.sent_ns = link.sent_ns.split_off(&(seq + 1));
                }
            }
            Event::Resend { src, dst } => self.on_resend(src, dst),
            Event::Timer { node, task, interval_ns } => {
                if !self.nodes[node].disabled.contains(&task) {
                    self.schedule(self.now_ns, Event::Inbox { node, work: Work::Timer { task }, fg: false });
                }
                self.schedule(self.now_ns + interval_ns, Event::Timer { node, task, interval_ns });
            }
            Event::Reply { session, request_id, payload } => self.on_reply(session, request_id, &payload),
            Event::ClientTimeout { session, request_id } => {
                let stale = self
                    .sessions
                    .get(&session)
                    .and_then(|s| s.current.as_ref())
                    .and_then(|c| c.pending)
                    .is_none_or(|(id, _)| id != request_id);
                if !stale {
                    self.stats.client_timeouts += 1;
                    self.finish_op(session, false);
                    self.advance(session);
                }
            }
            Event::SessionStart { session } => self.advance(session),
        }
    }

    fn wake(&mut self, node: usize) {
        let n = &mut self.nodes[node];
        if !n.exec_scheduled && !n.inbox.is_empty() {
            n.exec_scheduled = true;
            let at = n.busy_until.max(self.now_ns);
            self.schedule(at, Event::Exec { node });
        }
    }

    fn exec(&mut self, idx: usize) {
        self.nodes[idx].exec_scheduled = false;
        let Some((work, fg)) = self.nodes[idx].inbox.pop_front() else { return };
        let t = self.now_ns;
        let node_id = self.nodes[idx].id;
        let now_us = self.node_clock_us(node_id, t);
        let ctx = SimCtx::<P> {
            node: node_id,
            idx,
            now_us,
            index: &self.index,
            links: &self.links,
            history: &self.history,
            recording: self.cfg.record_history,
            outputs: RefCell::new(Vec::new()),
            out_bytes: RefCell::new(0),
            queue_full: RefCell::new(0),
        };
        let protocol = &self.nodes[idx].protocol;
        let mut in_bytes = 0usize;
        let mut trace = None;
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| match work {
            Work::Client { session, request_id, payload } => {
                in_bytes = payload.len();
                match P::ClientMsg::decode(&payload) {
                    Ok(msg) => {
                        *self.stats.client_requests.entry(P::classify(&msg)).or_default() += 1;
                        trace = Some(("client", format!("c{session}"), request_id, &payload[..]).to_owned_event(t));
                        protocol.handle_client(&ctx, ReplyAgent::new(request_id, session, None), msg);
                    }
                    Err(_) => self.stats.decode_errors += 1,
                }
            }
            Work::Deferred { agent, msg } => protocol.handle_client(&ctx, agent, msg),
            Work::Server { from, envelope } => {
                in_bytes = envelope.len();
                let from_id = self.nodes[from].id;
                match Envelope::decode(&envelope) {
                    Ok(Envelope::Server(frame)) => match P::ServerMsg::decode(&frame.payload) {
                        Ok(msg) => {
                            let name = msg.variant_name().unwrap_or("message");
                            *self.stats.server_messages.entry(name.to_string()).or_default() += 1;
                            protocol.handle_server(&ctx, from_id, msg);
                        }
                        Err(_) => self.stats.decode_errors += 1,
                    },
                    Ok(Envelope::Storage(frame)) => {
                        self.stats.storage_frames += 1;
                        protocol.apply_storage_replica(&ctx, from_id, &frame.key, &frame.record);
                    }
                    _ => self.stats.decode_errors += 1,
                }
            }
            Work::Timer { task } => {
                self.stats.timer_runs += 1;
                protocol.on_timer(&ctx, task);
            }
        }));
        if result.is_err() {
            self.stats.handler_panics += 1;
            log::error!("{node_id}: handler panicked");
        }
        let store = protocol.store();
        if store.replication_mode() == ReplicationMode::StorageCentric {
            let writes = store.take_replication();
            let source = node_id.to_string();
            for dest in self.nodes[idx].config.ring_successors() {
                for (key, record) in &writes {
                    let frame = |seq| {
                        Envelope::Storage(StorageFrame { seq, source: source.clone(), key: key.clone(), record: record.clone() })
                    };
                    if let Err(e) = ctx.enqueue(dest, frame) {
                        log::warn!("{node_id}: storage replicate to {dest}: {e}");
                    }
                }
            }
        }
        let outputs = ctx.outputs.take();
        let cost = self.cfg.service.cost_ns(in_bytes + *ctx.out_bytes.borrow());
        self.stats.queue_full += *ctx.queue_full.borrow();
        drop(ctx);
        if let (true, Some(ev)) = (self.cfg.record_trace, trace) {
            self.trace.push(ev);
        }
        let done = t + cost;
        self.nodes[idx].busy_until = done;
        for out in outputs {
            match out {
                Output::Transmit { dst, seq, bytes } => self.transmit(idx, dst, seq, bytes, done, fg),
                Output::Reply { session, request_id, payload } => {
                    let arrival = done + self.cfg.client_link.sample_ns(&mut self.rng);
                    self.schedule(arrival, Event::Reply { session, request_id, payload });
                }
                Output::Defer { agent, msg, delay_ms } => {
                    self.stats.deferrals += 1;
                    self.stats.deferred_ms += delay_ms;
                    let work = Work::Deferred { agent, msg };
                    self.schedule(done + delay_ms * NS_PER_MS, Event::Inbox { node: idx, work, fg });
                }
            }
        }
        if fg {
            self.pending_fg -= 1;
        }
        self.wake(idx);
    }

    fn link_delay(&mut self, src: usize, dst: usize) -> u64 {
        let key = (self.nodes[src].id, self.nodes[dst].id);
        let delay = self.cfg.link_overrides.get(&key).copied().unwrap_or(self.cfg.server_link);
        delay.sample_ns(&mut self.rng)
    }

    fn link_down(&self, src: usize, dst: usize, t_ns: u64) -> bool {
        let (a, b) = (self.nodes[src].id, self.nodes[dst].id);
        self.cfg.outages.iter().any(|o| o.covers(a, b, t_ns))
    }

    /// Puts a frame on the wire at `at`; arrivals on one link never reorder.
    fn transmit(&mut self, src: usize, dst: usize, seq: u64, bytes: Vec<u8>, at: u64, fg: bool) {
        self.stats.frames_sent += 1;
        if fg {
            self.pending_fg += 1;
        }
        let arm = {
            let mut links = self.links.borrow_mut();
            let link = links.get_mut(&(src, dst)).expect("link exists");
            link.sent_ns.insert(seq, at);
            if fg {
                link.fg.insert(seq);
            }
            let arm = !link.resend_armed;
            link.resend_armed = true;
            arm
        };
        if arm {
            self.schedule(at + self.cfg.resend_interval_ms * NS_PER_MS, Event::Resend { src, dst });
        }
        if self.link_down(src, dst, at) {
            self.stats.frames_dropped += 1;
            if self.cfg.record_trace {
                let ev = ("drop", self.nodes[dst].id.to_string(), seq, &bytes[..]).to_owned_event(at);
                self.trace.push(TraceEvent { node: self.nodes[src].id.to_string(), ..ev });
            }
            return;
        }
        let delay = self.link_delay(src, dst);
        let arrival = {
            let mut links = self.links.borrow_mut();
            let link = links.get_mut(&(src, dst)).expect("link exists");
            let arrival = (at + delay).max(link.last_arrival_ns);
            link.last_arrival_ns = arrival;
            arrival
        };
        self.schedule(arrival, Event::Frame { src, dst, seq, bytes });
    }

    fn on_frame(&mut self, src: usize, dst: usize, seq: u64, bytes: Vec<u8>) {
        let (verdict, ack, fg) = {
            let mut links = self.links.borrow_mut();
            let link = links.get_mut(&(src, dst)).expect("link exists");
            let verdict = link.inbound.accept(seq);
            let fg = verdict == Accept::Deliver && link.fg.remove(&seq);
            (verdict, link.inbound.ack_value(), fg)
        };
        if self.cfg.record_trace {
            let kind = match verdict {
                Accept::Deliver => "deliver",
                Accept::Duplicate => "duplicate",
                Accept::Gap => "gap",
            };
            let ev = (kind, self.nodes[src].id.to_string(), seq, &bytes[..]).to_owned_event(self.now_ns);
            self.trace.push(TraceEvent { node: self.nodes[dst].id.to_string(), ..ev });
        }
        if verdict == Accept::Deliver {
            self.schedule(self.now_ns, Event::Inbox { node: dst, work: Work::Server { from: src, envelope: bytes }, fg });
            if fg {
                self.pending_fg -= 1;
            }
        }
        // Acks ride the reverse direction and share its outages.
        if self.link_down(dst, src, self.now_ns) {
            return;
        }
        let delay = self.link_delay(dst, src);
        let arrival = {
            let mut links = self.links.borrow_mut();
            let link = links.get_mut(&(src, dst)).expect("link exists");
            let arrival = (self.now_ns + delay).max(link.reverse_last_arrival_ns);
            link.reverse_last_arrival_ns = arrival;
            arrival
        };
        self.schedule(arrival, Event::Ack { src, dst, seq: ack });
    }

    /// Retransmits unacked frames last sent at least one resend interval ago.
    fn on_resend(&mut self, src: usize, dst: usize) {
        let now = self.now_ns;
        let interval = self.cfg.resend_interval_ms * NS_PER_MS;
        let frames: Vec<(u64, Vec<u8>)> = {
            let mut links = self.links.borrow_mut();
            let link = links.get_mut(&(src, dst)).expect("link exists");
            if link.out.is_empty() {
                link.resend_armed = false;
                return;
            }
            let sent = &link.sent_ns;
            let frames: Vec<(u64, Vec<u8>)> = link
                .out
                .unacked()
                .filter(|(s, _)| sent.get(s).is_none_or(|t| t + interval <= now))
                .map(|(s, b)| (s, b.to_vec()))
                .collect();
            for (s, _) in &frames {
                link.sent_ns.insert(*s, now);
            }
            frames
        };
        for (seq, bytes) in frames {
            self.stats.retransmissions += 1;
            self.stats.frames_sent += 1;
            if self.link_down(src, dst, now) {
                self.stats.frames_dropped += 1;
                continue;
            }
            let delay = self.link_delay(src, dst);
            let arrival = {
                let mut links = self.links.borrow_mut();
                let link = links.get_mut(&(src, dst)).expect("link exists");
                let arrival = (now + delay).max(link.last_arrival_ns);
                link.last_arrival_ns = arrival;
                arrival
            };
            self.schedule(arrival, Event::Frame { src, dst, seq, bytes });
        }
        self.schedule(now + self.cfg.resend_interval_ms * NS_PER_MS, Event::Resend { src, dst });
    }

    /// Issues the session's next request, starting a new operation if the
    /// current one is complete.
    fn advance(&mut self, session: u64) {
        loop {
            let now = self.now_ns;
            let Some(s) = self.sessions.get_mut(&session) else { return };
            if s.done {
                return;
            }
            if s.current.is_none() {
                match s.source.next_op() {
                    Some(op) if !op.steps.is_empty() => {
                        let key = op.steps[0].key().to_string();
                        let node = s.client.route(&key);
                        s.current = Some(Current {
                            kind: op.kind,
                            steps: op.steps.into(),
                            key,
                            node,
                            start_ns: now,
                            issued: 0,
                            deps: 0,
                            pending: None,
                        });
                    }
                    Some(_) => continue,
                    None => {
                        s.done = true;
                        self.active_sessions -= 1;
                        return;
                    }
                }
            }
            let cur = s.current.as_mut().expect("current op");
            let Some(step) = cur.steps.pop_front() else {
                self.finish_op(session, true);
                continue;
            };
            let dest = s.client.route(step.key());
            let (msg, class) = match step {
                Step::Get(k) => (s.client.get_request(&k), OpKind::Get),
                Step::Put(k, v) => {
                    let msg = s.client.put_request(&k, v);
                    cur.deps += s.client.last_put_deps() as u64;
                    (msg, OpKind::Put)
                }
            };
            s.next_request += 1;
            let request_id = s.next_request;
            cur.issued += 1;
            cur.pending = Some((request_id, class));
            let Some(&node) = self.index.get(&dest) else {
                log::warn!("session {session}: no server {dest}");
                self.finish_op(session, false);
                continue;
            };
            let payload = msg.encode();
            let arrival = now + self.cfg.client_link.sample_ns(&mut self.rng);
            self.schedule(arrival, Event::Inbox { node, work: Work::Client { session, request_id, payload }, fg: true });
            let timeout = now + self.cfg.client_timeout_ms * NS_PER_MS;
            self.schedule(timeout, Event::ClientTimeout { session, request_id });
            return;
        }
    }

    fn on_reply(&mut self, session: u64, request_id: u64, payload: &[u8]) {
        let Some(s) = self.sessions.get_mut(&session) else { return };
        let Some(cur) = s.current.as_mut() else { return };
        let Some((pending, class)) = cur.pending else { return };
        if pending != request_id {
            return;
        }
        cur.pending = None;
        if self.cfg.record_trace {
            let ev = ("reply", cur.node.to_string(), request_id, payload).to_owned_event(self.now_ns);
            self.trace.push(TraceEvent { node: format!("c{session}"), ..ev });
        }
        let ok = match <P::Reply as Message>::decode(payload) {
            Ok(reply) => match class {
                OpKind::Put => s.client.put_complete(reply).is_ok(),
                _ => s.client.get_complete(reply).is_ok(),
            },
            Err(_) => false,
        };
        if ok {
            self.advance(session);
        } else {
            self.finish_op(session, false);
            self.advance(session);
        }
    }

    /// Records the current operation, abandoning any remaining steps.
    fn finish_op(&mut self, session: u64, ok: bool) {
        let Some(s) = self.sessions.get_mut(&session) else { return };
        let Some(cur) = s.current.take() else { return };
        self.ops.push(OpRecord {
            session,
            replica: s.client.setup().replica,
            kind: cur.kind,
            key: cur.key,
            node: cur.node,
            start_ns: cur.start_ns,
            latency_ns: self.now_ns - cur.start_ns,
            ok,
            steps: cur.issued,
            deps: cur.deps,
        });
    }
}

trait ToTrace {
    fn to_owned_event(self, t_ns: u64) -> TraceEvent;
}

impl ToTrace for (&str, String, u64, &[u8]) {
    fn to_owned_event(self, t_ns: u64) -> TraceEvent {
        let (kind, peer, seq, bytes) = self;
        TraceEvent {
            t_ns,
            kind: kind.to_string(),
            node: String::new(),
            peer,
            seq,
            len: bytes.len() as u64,
            digest: crate::node::key_hash_bytes(bytes),
        }
    }
}
