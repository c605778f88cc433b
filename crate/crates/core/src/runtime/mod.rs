//! Event-driven kernel interface between protocols and transports.
//!
//! A protocol implements [`Protocol`] (server side) and [`ProtocolClient`]
//! (client side). Handlers receive a [`Context`] through which they reach the
//! network, the clock, and the history recorder. The same protocol code runs
//! under the TCP transport in [`tcp`] and under [`crate::sim`].
//!
//! Handlers take `&self` and may run concurrently; protocols guard their own
//! state.

pub mod channel;
pub mod envelope;
pub mod mock;
pub mod tcp;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::codec::{DecodeError, Message};
use crate::config::{ConfigError, ServerConfig};
use crate::history::HistoryEvent;
use crate::node::{partition_for, ClusterShape, NodeId};
use crate::storage::ReplicatedStore;

pub use channel::{Accept, InboundChannel, OutboundChannel};
pub use envelope::Envelope;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SendError {
    #[error("outbound queue to {dest} is full ({capacity} unacknowledged messages)")]
    QueueFull { dest: NodeId, capacity: usize },
    #[error("unknown destination {0}")]
    UnknownDestination(NodeId),
    #[error("server is shutting down")]
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplyError {
    #[error("request {request_id} already answered")]
    AlreadyReplied { request_id: u64 },
    #[error("client {client_id} disconnected")]
    Disconnected { client_id: u64 },
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("timed out waiting for {0}")]
    Timeout(NodeId),
    #[error("timed out waiting for {0}")]
    TimeoutAt(String),
    #[error("unknown server {0}")]
    UnknownServer(NodeId),
    #[error("server reported failure")]
    Failed,
    #[error("reply does not match the request")]
    UnexpectedReply,
    #[error("undecodable reply: {0}")]
    Decode(#[from] DecodeError),
    #[error("connection: {0}")]
    Io(#[from] std::io::Error),
}

/// Operation class of a client message, used for wire-level accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Get,
    Put,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodicTask {
    pub id: u32,
    pub interval_ms: u64,
}

/// Delivers an encoded reply to the connection a request arrived on.
pub trait ReplySink: Send + Sync {
    fn deliver(&self, request_id: u64, payload: &[u8]) -> Result<(), ReplyError>;
}

/// Handle for answering one client request, at most once.
pub struct ReplyAgent {
    pub request_id: u64,
    /// Session identifier of the requesting client.
    pub client_id: u64,
    replied: Arc<AtomicBool>,
    sink: Option<Arc<dyn ReplySink>>,
}

impl ReplyAgent {
    pub fn new(request_id: u64, client_id: u64, sink: Option<Arc<dyn ReplySink>>) -> Self {
        ReplyAgent { request_id, client_id, replied: Arc::new(AtomicBool::new(false)), sink }
    }

    /// Marks the request answered; errors if it already was.
    pub fn claim(&self) -> Result<(), ReplyError> {
        if self.replied.swap(true, Ordering::AcqRel) {
            Err(ReplyError::AlreadyReplied { request_id: self.request_id })
        } else {
            Ok(())
        }
    }

    pub fn has_replied(&self) -> bool {
        self.replied.load(Ordering::Acquire)
    }

    pub fn sink(&self) -> Option<&Arc<dyn ReplySink>> {
        self.sink.as_ref()
    }
}

impl std::fmt::Debug for ReplyAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReplyAgent")
            .field("request_id", &self.request_id)
            .field("client_id", &self.client_id)
            .field("replied", &self.has_replied())
            .finish()
    }
}

/// Services a transport offers to protocol handlers.
pub trait Context<P: Protocol> {
    fn node(&self) -> NodeId;

    /// Node-local wall clock in milliseconds.
    fn now_ms(&self) -> u64;

    /// The same clock in microseconds.
    fn now_us(&self) -> u64 {
        self.now_ms().saturating_mul(1000)
    }

    /// Queues `msg` for reliable FIFO delivery and returns immediately.
    fn send_to_server(&self, dest: NodeId, msg: &P::ServerMsg) -> Result<(), SendError>;

    fn send_reply(&self, agent: &ReplyAgent, reply: &P::Reply) -> Result<(), ReplyError>;

    /// Re-dispatches `msg` to the client handler after `delay_ms`.
    fn defer(&self, agent: ReplyAgent, msg: P::ClientMsg, delay_ms: u64);

    /// Whether [`Context::record`] keeps events.
    fn recording(&self) -> bool {
        false
    }

    fn record(&self, _event: HistoryEvent) {}
}

pub trait Protocol: Sized + Send + Sync + 'static {
    const NAME: &'static str;

    type ServerMsg: Message + Send + 'static;
    type ClientMsg: Message + Send + 'static;
    type Reply: Message + Send + 'static;
    type Client: ProtocolClient<Protocol = Self>;

    fn build(config: &ServerConfig) -> Result<Self, ConfigError>;

    fn periodic_tasks(&self) -> Vec<PeriodicTask> {
        Vec::new()
    }

    fn handle_client(&self, ctx: &dyn Context<Self>, agent: ReplyAgent, msg: Self::ClientMsg);

    fn handle_server(&self, ctx: &dyn Context<Self>, from: NodeId, msg: Self::ServerMsg);

    fn on_timer(&self, _ctx: &dyn Context<Self>, _task: u32) {}

    fn store(&self) -> &dyn ReplicatedStore;

    /// Applies a record forwarded by a peer's storage engine.
    fn apply_storage_replica(&self, _ctx: &dyn Context<Self>, _from: NodeId, key: &str, record: &[u8]) {
        self.store().apply_replicated(key, record);
    }

    fn classify(msg: &Self::ClientMsg) -> OpKind;

    /// Encoded winning version of every stored key, for convergence checks.
    fn heads(&self) -> BTreeMap<String, Vec<u8>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientSetup {
    pub client_id: u64,
    /// Replica the client is attached to.
    pub replica: u32,
    pub shape: ClusterShape,
}

impl ClientSetup {
    /// Local partition owning `key`.
    pub fn route(&self, key: &str) -> NodeId {
        NodeId::new(self.replica, partition_for(key, self.shape.partitions))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GetOutcome {
    pub value: Option<Vec<u8>>,
    /// Protocol metadata rendered for display.
    pub meta: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PutOutcome {
    pub meta: String,
}

/// Client-side protocol state machine. Transports call a `*_request` method,
/// deliver the message to the returned server, and pass the reply to the
/// matching `*_complete` method.
pub trait ProtocolClient: Send + 'static {
    type Protocol: Protocol;

    fn new(setup: ClientSetup) -> Self;

    fn setup(&self) -> &ClientSetup;

    fn route(&self, key: &str) -> NodeId {
        self.setup().route(key)
    }

    fn put_request(&mut self, key: &str, value: Vec<u8>) -> <Self::Protocol as Protocol>::ClientMsg;

    fn put_complete(&mut self, reply: <Self::Protocol as Protocol>::Reply) -> Result<PutOutcome, ClientError>;

    fn get_request(&mut self, key: &str) -> <Self::Protocol as Protocol>::ClientMsg;

    fn get_complete(&mut self, reply: <Self::Protocol as Protocol>::Reply) -> Result<GetOutcome, ClientError>;

    /// Dependencies carried by the most recent put request.
    fn last_put_deps(&self) -> usize {
        0
    }
}

/// Decodes a client payload for `P`.
pub fn decode_client<P: Protocol>(payload: &[u8]) -> Result<P::ClientMsg, DecodeError> {
    P::ClientMsg::decode(payload)
}
