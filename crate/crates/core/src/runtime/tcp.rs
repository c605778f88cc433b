//! Socket transport.
//!
//! Each server listens on a client port and a server port. Every peer gets a
//! sender thread that owns the outbound connection, pushes new frames as
//! they are queued, and resends everything unacknowledged once per resend
//! interval. Incoming server connections are read by one thread each, which
//! delivers in sequence order and acknowledges cumulatively.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Condvar, Mutex};

use super::envelope::{Ack, ClientFrame, Envelope, Hello, PeerStatus, Ping, Pong, ReplyFrame, ServerFrame, StatusReport, StatusRequest, StorageFrame};
use super::{
    Accept, ClientError, ClientSetup, Context, GetOutcome, InboundChannel, OutboundChannel, Protocol, ProtocolClient,
    PutOutcome, ReplyAgent, ReplyError, ReplySink, SendError,
};
use crate::codec::Message;
use crate::config::{ConfigError, ReplicationMode, ServerConfig};
use crate::node::NodeId;

const MAX_FRAME: usize = 64 << 20;
const POLL: Duration = Duration::from_millis(20);
const PING_EVERY: Duration = Duration::from_secs(1);

/// Wall clock in milliseconds, optionally offset to emulate skew.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;

    fn now_us(&self) -> u64 {
        self.now_ms().saturating_mul(1000)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock {
    pub offset_ms: i64,
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        let ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as i64).unwrap_or(0);
        (ms + self.offset_ms).max(0) as u64
    }

    fn now_us(&self) -> u64 {
        let us = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as i64).unwrap_or(0);
        (us + self.offset_ms * 1000).max(0) as u64
    }
}

fn micros_since(start: Instant) -> u64 {
    start.elapsed().as_micros() as u64
}

/// Reads one length-prefixed frame; `None` on clean end of stream.
pub fn read_frame(stream: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match stream.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn write_envelope(stream: &mut impl Write, env: &Envelope) -> io::Result<()> {
    write_raw(stream, &env.encode())
}

fn write_raw(stream: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let mut frame = Vec::with_capacity(payload.len() + 4);
    crate::codec::write_frame(payload, &mut frame);
    stream.write_all(&frame)
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error("{node}: cannot bind {addr}: {source}")]
    Bind { node: NodeId, addr: String, source: io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

struct Peer {
    addr: String,
    chan: Mutex<OutboundChannel>,
    wake: Condvar,
    connected: AtomicBool,
    rtt_us: AtomicU64,
}

struct Shared<P: Protocol> {
    node: NodeId,
    config: ServerConfig,
    protocol: P,
    clock: Arc<dyn Clock>,
    peers: BTreeMap<NodeId, Peer>,
    inbound: Mutex<BTreeMap<NodeId, Arc<Mutex<InboundChannel>>>>,
    streams: Mutex<Vec<TcpStream>>,
    shutdown: AtomicBool,
    started: Instant,
    clients: AtomicU64,
    dropped: AtomicU64,
    panics: AtomicU64,
    next_client: AtomicU64,
}

/// Running server; stop it with [`ServerHandle::stop`] or by dropping it.
pub struct ServerHandle {
    node: NodeId,
    client_addr: SocketAddr,
    server_addr: SocketAddr,
    shutdown: Box<dyn Fn() + Send + Sync>,
    status: Box<dyn Fn() -> StatusReport + Send + Sync>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn client_addr(&self) -> SocketAddr {
        self.client_addr
    }

    pub fn server_addr(&self) -> SocketAddr {
        self.server_addr
    }

    pub fn status(&self) -> StatusReport {
        (self.status)()
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        (self.shutdown)();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Starts `protocol` on the ports in `config` using the system clock.
pub fn start_server<P: Protocol>(config: ServerConfig, protocol: P) -> Result<ServerHandle, StartError> {
    start_server_with_clock(config, protocol, Arc::new(SystemClock::default()))
}

pub fn start_server_with_clock<P: Protocol>(
    config: ServerConfig,
    protocol: P,
    clock: Arc<dyn Clock>,
) -> Result<ServerHandle, StartError> {
    config.validate()?;
    let node = config.node;
    let bind = |port: u16| {
        let addr = format!("{}:{}", config.host, port);
        let listener = TcpListener::bind(&addr).map_err(|source| StartError::Bind { node, addr: addr.clone(), source })?;
        listener.set_nonblocking(true).map_err(|source| StartError::Bind { node, addr, source })?;
        Ok::<_, StartError>(listener)
    };
    let client_listener = bind(config.client_port)?;
    let server_listener = bind(config.server_port)?;
    let client_addr = client_listener.local_addr().expect("bound");
    let server_addr = server_listener.local_addr().expect("bound");

    let peers = config
        .peers
        .iter()
        .map(|(id, addr)| {
            let peer = Peer {
                addr: addr.clone(),
                chan: Mutex::new(OutboundChannel::new(*id, config.queue_capacity, config.resend_interval_ms)),
                wake: Condvar::new(),
                connected: AtomicBool::new(false),
                rtt_us: AtomicU64::new(0),
            };
            (*id, peer)
        })
        .collect();
    let shared = Arc::new(Shared {
        node,
        config,
        protocol,
        clock,
        peers,
        inbound: Mutex::new(BTreeMap::new()),
        streams: Mutex::new(Vec::new()),
        shutdown: AtomicBool::new(false),
        started: Instant::now(),
        clients: AtomicU64::new(0),
        dropped: AtomicU64::new(0),
        panics: AtomicU64::new(0),
        next_client: AtomicU64::new(1),
    });

    let mut threads = Vec::new();
    {
        let s = shared.clone();
        threads.push(thread::spawn(move || accept_loop(&s, client_listener, serve_client)));
    }
    {
        let s = shared.clone();
        threads.push(thread::spawn(move || accept_loop(&s, server_listener, serve_server)));
    }
    for id in shared.peers.keys().copied().collect::<Vec<_>>() {
        let s = shared.clone();
        threads.push(thread::spawn(move || sender_loop(&s, id)));
    }
    for task in shared.protocol.periodic_tasks() {
        let s = shared.clone();
        threads.push(thread::spawn(move || timer_loop(&s, task.id, task.interval_ms)));
    }
    log::info!("{node}: serving clients on {client_addr}, servers on {server_addr}");

    let stop_shared = shared.clone();
    let status_shared = shared;
    Ok(ServerHandle {
        node,
        client_addr,
        server_addr,
        shutdown: Box::new(move || {
            stop_shared.shutdown.store(true, Ordering::Release);
            for peer in stop_shared.peers.values() {
                peer.wake.notify_all();
            }
            for s in stop_shared.streams.lock().drain(..) {
                let _ = s.shutdown(Shutdown::Both);
            }
        }),
        status: Box::new(move || status_shared.status()),
        threads,
    })
}

impl<P: Protocol> Shared<P> {
    fn stopping(&self) -> bool {
        self.shutdown.load(Ordering::Acquire)
    }

    fn track(&self, stream: &TcpStream) {
        if let Ok(clone) = stream.try_clone() {
            self.streams.lock().push(clone);
        }
    }

    fn status(&self) -> StatusReport {
        StatusReport {
            node: self.node.to_string(),
            protocol: P::NAME.to_string(),
            uptime_ms: self.started.elapsed().as_millis() as u64,
            clients_connected: self.clients.load(Ordering::Relaxed),
            peers: self
                .peers
                .iter()
                .map(|(id, p)| {
                    let chan = p.chan.lock();
                    PeerStatus {
                        node: id.to_string(),
                        connected: p.connected.load(Ordering::Relaxed),
                        queue_depth: chan.len() as u64,
                        rtt_us: p.rtt_us.load(Ordering::Relaxed),
                        sent: chan.sent_total(),
                    }
                })
                .collect(),
            dropped_envelopes: self.dropped.load(Ordering::Relaxed),
            handler_panics: self.panics.load(Ordering::Relaxed),
        }
    }

    fn enqueue(&self, dest: NodeId, build: impl FnOnce(u64) -> Envelope) -> Result<(), SendError> {
        if self.stopping() {
            return Err(SendError::Closed);
        }
        let peer = self.peers.get(&dest).ok_or(SendError::UnknownDestination(dest))?;
        peer.chan.lock().enqueue(|seq| build(seq).encode())?;
        peer.wake.notify_one();
        Ok(())
    }

    /// Runs a handler, isolating panics, then forwards storage-centric writes.
    fn guarded(&self, what: &str, f: impl FnOnce()) {
        if catch_unwind(AssertUnwindSafe(f)).is_err() {
            self.panics.fetch_add(1, Ordering::Relaxed);
            log::error!("{}: {what} handler panicked", self.node);
        }
        let store = self.protocol.store();
        if store.replication_mode() == ReplicationMode::StorageCentric {
            let writes = store.take_replication();
            if writes.is_empty() {
                return;
            }
            let source = self.node.to_string();
            for dest in self.config.ring_successors() {
                for (key, record) in &writes {
                    let frame = |seq| {
                        Envelope::Storage(StorageFrame { seq, source: source.clone(), key: key.clone(), record: record.clone() })
                    };
                    if let Err(e) = self.enqueue(dest, frame) {
                        log::warn!("{}: storage replicate to {dest}: {e}", self.node);
                    }
                }
            }
        }
    }
}

struct TcpContext<'a, P: Protocol> {
    shared: &'a Shared<P>,
    deferred: RefCell<Option<(ReplyAgent, P::ClientMsg, u64)>>,
}

impl<'a, P: Protocol> TcpContext<'a, P> {
    fn new(shared: &'a Shared<P>) -> Self {
        TcpContext { shared, deferred: RefCell::new(None) }
    }
}

impl<P: Protocol> Context<P> for TcpContext<'_, P> {
    fn node(&self) -> NodeId {
        self.shared.node
    }

    fn now_ms(&self) -> u64 {
        self.shared.clock.now_ms()
    }

    fn now_us(&self) -> u64 {
        self.shared.clock.now_us()
    }

    fn send_to_server(&self, dest: NodeId, msg: &P::ServerMsg) -> Result<(), SendError> {
        let source = self.shared.node.to_string();
        let payload = msg.encode();
        self.shared.enqueue(dest, |seq| Envelope::Server(ServerFrame { seq, source, payload }))
    }

    fn send_reply(&self, agent: &ReplyAgent, reply: &P::Reply) -> Result<(), ReplyError> {
        agent.claim()?;
        match agent.sink() {
            Some(sink) => sink.deliver(agent.request_id, &reply.encode()),
            None => Err(ReplyError::Disconnected { client_id: agent.client_id }),
        }
    }

    fn defer(&self, agent: ReplyAgent, msg: P::ClientMsg, delay_ms: u64) {
        *self.deferred.borrow_mut() = Some((agent, msg, delay_ms));
    }
}

fn accept_loop<P: Protocol>(shared: &Arc<Shared<P>>, listener: TcpListener, serve: fn(Arc<Shared<P>>, TcpStream)) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stopping() {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                shared.track(&stream);
                let s = shared.clone();
                workers.push(thread::spawn(move || serve(s, stream)));
                workers.retain(|w| !w.is_finished());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("{}: accept failed: {e}", shared.node);
                thread::sleep(POLL);
            }
        }
    }
    for w in workers {
        let _ = w.join();
    }
}

struct ConnSink {
    stream: Mutex<TcpStream>,
    alive: AtomicBool,
    client_id: u64,
}

impl ReplySink for ConnSink {
    fn deliver(&self, request_id: u64, payload: &[u8]) -> Result<(), ReplyError> {
        let env = Envelope::Reply(ReplyFrame { request_id, payload: payload.to_vec() });
        if !self.alive.load(Ordering::Acquire) || write_envelope(&mut *self.stream.lock(), &env).is_err() {
            log::warn!("reply to disconnected client {} dropped", self.client_id);
            return Err(ReplyError::Disconnected { client_id: self.client_id });
        }
        Ok(())
    }
}

fn serve_client<P: Protocol>(shared: Arc<Shared<P>>, mut stream: TcpStream) {
    let Ok(writer) = stream.try_clone() else { return };
    let conn_id = shared.next_client.fetch_add(1, Ordering::Relaxed);
    let sink = Arc::new(ConnSink { stream: Mutex::new(writer), alive: AtomicBool::new(true), client_id: conn_id });
    shared.clients.fetch_add(1, Ordering::Relaxed);
    while !shared.stopping() {
        let frame = match read_frame(&mut stream) {
            Ok(Some(f)) => f,
            _ => break,
        };
        let env = match Envelope::decode(&frame) {
            Ok(env) => env,
            Err(e) => {
                shared.dropped.fetch_add(1, Ordering::Relaxed);
                log::warn!("{}: undecodable client frame: {e}", shared.node);
                continue;
            }
        };
        match env {
            Envelope::Client(ClientFrame { request_id, client_id, payload }) => {
                let msg = match P::ClientMsg::decode(&payload) {
                    Ok(m) => m,
                    Err(e) => {
                        shared.dropped.fetch_add(1, Ordering::Relaxed);
                        log::warn!("{}: undecodable client payload: {e}", shared.node);
                        continue;
                    }
                };
                let client = if client_id == 0 { conn_id } else { client_id };
                let sink: Arc<dyn ReplySink> = sink.clone();
                let mut pending = Some((ReplyAgent::new(request_id, client, Some(sink)), msg));
                while let Some((agent, msg)) = pending.take() {
                    let ctx = TcpContext::new(&shared);
                    shared.guarded("client", || shared.protocol.handle_client(&ctx, agent, msg));
                    if let Some((agent, msg, delay)) = ctx.deferred.take() {
                        thread::sleep(Duration::from_millis(delay));
                        pending = Some((agent, msg));
                    }
                }
            }
            Envelope::StatusRequest(_) => {
                let status = Envelope::Status(shared.status());
                if write_envelope(&mut *sink.stream.lock(), &status).is_err() {
                    break;
                }
            }
            Envelope::Ping(p) => {
                let pong = Envelope::Pong(Pong { nonce: p.nonce, sent_us: p.sent_us });
                if write_envelope(&mut *sink.stream.lock(), &pong).is_err() {
                    break;
                }
            }
            other => {
                shared.dropped.fetch_add(1, Ordering::Relaxed);
                log::warn!("{}: unexpected {} on client port", shared.node, other.kind());
            }
        }
    }
    sink.alive.store(false, Ordering::Release);
    shared.clients.fetch_sub(1, Ordering::Relaxed);
}

fn serve_server<P: Protocol>(shared: Arc<Shared<P>>, mut stream: TcpStream) {
    let Ok(mut writer) = stream.try_clone() else { return };
    let source = match read_frame(&mut stream).ok().flatten().map(|f| Envelope::decode(&f)) {
        Some(Ok(Envelope::Hello(Hello { source }))) => match source.parse::<NodeId>() {
            Ok(id) => id,
            Err(_) => return,
        },
        Some(Ok(Envelope::StatusRequest(_))) => {
            let _ = write_envelope(&mut writer, &Envelope::Status(shared.status()));
            return;
        }
        _ => {
            shared.dropped.fetch_add(1, Ordering::Relaxed);
            return;
        }
    };
    let inbound = shared.inbound.lock().entry(source).or_default().clone();
    let me = shared.node.to_string();
    while !shared.stopping() {
        let frame = match read_frame(&mut stream) {
            Ok(Some(f)) => f,
            _ => break,
        };
        let env = match Envelope::decode(&frame) {
            Ok(env) => env,
            Err(_) => {
                shared.dropped.fetch_add(1, Ordering::Relaxed);
                continue;
            }
        };
        match env {
            Envelope::Server(ServerFrame { seq, payload, .. }) => {
                let mut chan = inbound.lock();
                if chan.accept(seq) == Accept::Deliver {
                    match P::ServerMsg::decode(&payload) {
                        Ok(msg) => {
                            let ctx = TcpContext::new(&shared);
                            shared.guarded("server", || shared.protocol.handle_server(&ctx, source, msg));
                        }
                        Err(e) => {
                            shared.dropped.fetch_add(1, Ordering::Relaxed);
                            log::warn!("{}: undecodable server payload from {source}: {e}", shared.node);
                        }
                    }
                }
                let ack = Envelope::Ack(Ack { source: me.clone(), seq: chan.ack_value() });
                drop(chan);
                if write_envelope(&mut writer, &ack).is_err() {
                    break;
                }
            }
            Envelope::Storage(StorageFrame { seq, key, record, .. }) => {
                let mut chan = inbound.lock();
                if chan.accept(seq) == Accept::Deliver {
                    let ctx = TcpContext::new(&shared);
                    shared.guarded("storage", || shared.protocol.apply_storage_replica(&ctx, source, &key, &record));
                }
                let ack = Envelope::Ack(Ack { source: me.clone(), seq: chan.ack_value() });
                drop(chan);
                if write_envelope(&mut writer, &ack).is_err() {
                    break;
                }
            }
            Envelope::Ping(p) => {
                if write_envelope(&mut writer, &Envelope::Pong(Pong { nonce: p.nonce, sent_us: p.sent_us })).is_err() {
                    break;
                }
            }
            other => {
                shared.dropped.fetch_add(1, Ordering::Relaxed);
                log::warn!("{}: unexpected {} from {source}", shared.node, other.kind());
            }
        }
    }
}

fn connect(addr: &str, timeout: Duration) -> io::Result<TcpStream> {
    let mut last = io::Error::new(io::ErrorKind::AddrNotAvailable, format!("no address for {addr}"));
    for sock in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&sock, timeout) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn sender_loop<P: Protocol>(shared: &Arc<Shared<P>>, dest: NodeId) {
    let peer = &shared.peers[&dest];
    let resend = Duration::from_millis(shared.config.resend_interval_ms);
    let clock_start = Instant::now();
    while !shared.stopping() {
        let mut stream = match connect(&peer.addr, Duration::from_millis(500)) {
            Ok(s) => s,
            Err(_) => {
                wait_stop(shared, resend.min(Duration::from_millis(200)));
                continue;
            }
        };
        shared.track(&stream);
        if write_envelope(&mut stream, &Envelope::Hello(Hello { source: shared.node.to_string() })).is_err() {
            continue;
        }
        peer.connected.store(true, Ordering::Release);
        let reader = match stream.try_clone() {
            Ok(mut r) => {
                let s = shared.clone();
                thread::spawn(move || {
                    let peer = &s.peers[&dest];
                    while let Ok(Some(frame)) = read_frame(&mut r) {
                        match Envelope::decode(&frame) {
                            Ok(Envelope::Ack(a)) => {
                                peer.chan.lock().ack(a.seq);
                            }
                            Ok(Envelope::Pong(p)) => {
                                let rtt = micros_since(clock_start).saturating_sub(p.sent_us);
                                peer.rtt_us.store(rtt, Ordering::Relaxed);
                            }
                            _ => {}
                        }
                    }
                    peer.connected.store(false, Ordering::Release);
                })
            }
            Err(_) => continue,
        };

        let mut last_sent = 0u64;
        let mut last_resend = Instant::now();
        let mut last_ping = Instant::now() - PING_EVERY;
        let mut nonce = 0u64;
        while !shared.stopping() && peer.connected.load(Ordering::Acquire) {
            let frames: Vec<Vec<u8>> = {
                let mut chan = peer.chan.lock();
                if chan.unacked().all(|(s, _)| s <= last_sent) && last_ping.elapsed() < PING_EVERY {
                    let wait = if chan.is_empty() { resend } else { resend.saturating_sub(last_resend.elapsed()) };
                    peer.wake.wait_for(&mut chan, wait.max(Duration::from_millis(1)).min(PING_EVERY));
                }
                let go_back = last_resend.elapsed() >= resend;
                if go_back {
                    last_resend = Instant::now();
                }
                let out: Vec<(u64, Vec<u8>)> =
                    chan.unacked().filter(|(s, _)| go_back || *s > last_sent).map(|(s, b)| (s, b.to_vec())).collect();
                if let Some((s, _)) = out.last() {
                    last_sent = last_sent.max(*s);
                }
                out.into_iter().map(|(_, b)| b).collect()
            };
            let mut failed = frames.iter().any(|f| write_raw(&mut stream, f).is_err());
            if last_ping.elapsed() >= PING_EVERY {
                nonce += 1;
                let ping = Envelope::Ping(Ping { nonce, sent_us: micros_since(clock_start) });
                failed |= write_envelope(&mut stream, &ping).is_err();
                last_ping = Instant::now();
            }
            if failed {
                break;
            }
        }
        peer.connected.store(false, Ordering::Release);
        let _ = stream.shutdown(Shutdown::Both);
        let _ = reader.join();
    }
}

fn wait_stop<P: Protocol>(shared: &Shared<P>, d: Duration) {
    let deadline = Instant::now() + d;
    while !shared.stopping() && Instant::now() < deadline {
        thread::sleep(POLL.min(d));
    }
}

fn timer_loop<P: Protocol>(shared: &Arc<Shared<P>>, task: u32, interval_ms: u64) {
    let interval = Duration::from_millis(interval_ms.max(1));
    let mut next = Instant::now() + interval;
    while !shared.stopping() {
        let now = Instant::now();
        if now < next {
            thread::sleep((next - now).min(POLL));
            continue;
        }
        next += interval;
        let ctx = TcpContext::new(shared);
        shared.guarded("timer", || shared.protocol.on_timer(&ctx, task));
    }
}

/// Blocking client speaking to servers over their client ports.
pub struct TcpClient<C: ProtocolClient> {
    state: C,
    servers: BTreeMap<NodeId, String>,
    conns: BTreeMap<NodeId, TcpStream>,
    timeout: Duration,
    next_request: u64,
}

impl<C: ProtocolClient> TcpClient<C> {
    /// `servers` maps node ids to client-port addresses. Connections open
    /// lazily.
    pub fn new(setup: ClientSetup, servers: BTreeMap<NodeId, String>, timeout: Duration) -> Self {
        TcpClient { state: C::new(setup), servers, conns: BTreeMap::new(), timeout, next_request: 1 }
    }

    pub fn state(&self) -> &C {
        &self.state
    }

    fn conn(&mut self, server: NodeId) -> Result<&mut TcpStream, ClientError> {
        if !self.conns.contains_key(&server) {
            let addr = self.servers.get(&server).ok_or(ClientError::UnknownServer(server))?;
            let stream = connect(addr, self.timeout)?;
            stream.set_read_timeout(Some(self.timeout))?;
            self.conns.insert(server, stream);
        }
        Ok(self.conns.get_mut(&server).expect("inserted"))
    }

    pub fn client_send(&mut self, server: NodeId, msg: &<C::Protocol as Protocol>::ClientMsg) -> Result<u64, ClientError> {
        let request_id = self.next_request;
        self.next_request += 1;
        let client_id = self.state.setup().client_id;
        let env = Envelope::Client(ClientFrame { request_id, client_id, payload: msg.encode() });
        let result = write_envelope(self.conn(server)?, &env);
        if let Err(e) = result {
            self.conns.remove(&server);
            return Err(e.into());
        }
        Ok(request_id)
    }

    /// Next reply from `server`, skipping stale replies to older requests.
    pub fn client_read(&mut self, server: NodeId) -> Result<<C::Protocol as Protocol>::Reply, ClientError> {
        let expect = self.next_request - 1;
        loop {
            let stream = self.conns.get_mut(&server).ok_or(ClientError::Timeout(server))?;
            match read_frame(stream) {
                Ok(Some(frame)) => {
                    if let Envelope::Reply(r) = Envelope::decode(&frame)? {
                        if r.request_id == expect {
                            return Ok(<C::Protocol as Protocol>::Reply::decode(&r.payload)?);
                        }
                    }
                }
                Ok(None) => {
                    self.conns.remove(&server);
                    return Err(ClientError::Io(io::ErrorKind::ConnectionReset.into()));
                }
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Err(ClientError::Timeout(server));
                }
                Err(e) => {
                    self.conns.remove(&server);
                    return Err(e.into());
                }
            }
        }
    }

    pub fn put(&mut self, key: &str, value: Vec<u8>) -> Result<PutOutcome, ClientError> {
        let server = self.state.route(key);
        let msg = self.state.put_request(key, value);
        self.client_send(server, &msg)?;
        let reply = self.client_read(server)?;
        self.state.put_complete(reply)
    }

    pub fn get(&mut self, key: &str) -> Result<GetOutcome, ClientError> {
        let server = self.state.route(key);
        let msg = self.state.get_request(key);
        self.client_send(server, &msg)?;
        let reply = self.client_read(server)?;
        self.state.get_complete(reply)
    }
}

/// Asks the server at `addr` (either port) for its status.
pub fn query_status(addr: &str, timeout: Duration) -> Result<StatusReport, ClientError> {
    let mut stream = connect(addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    write_envelope(&mut stream, &Envelope::StatusRequest(StatusRequest {}))?;
    loop {
        match read_frame(&mut stream) {
            Ok(Some(frame)) => {
                if let Envelope::Status(s) = Envelope::decode(&frame)? {
                    return Ok(s);
                }
            }
            Ok(None) => return Err(ClientError::Io(io::ErrorKind::ConnectionReset.into())),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                return Err(ClientError::TimeoutAt(addr.to_string()));
            }
            Err(e) => return Err(e.into()),
        }
    }
}
