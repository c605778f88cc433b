//! Eventual consistency: writes apply locally at once and replicate
//! asynchronously; replicas agree on the winner of a key by last-writer-wins
//! over `(ts, sr)`.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::{record_applied, record_get, record_put, reply_logged, send_logged, Placement, Returned};
use crate::codec::Message;
use crate::config::{ConfigError, ReplicationMode, ServerConfig};
use crate::node::NodeId;
use crate::runtime::{ClientError, ClientSetup, Context, GetOutcome, OpKind, Protocol, ProtocolClient, PutOutcome, ReplyAgent};
use crate::storage::{ReplicatedStore, Storage, StorageStatus};

crate::message! {
    pub struct EcRecord {
        1 => pub key: String [required],
        2 => pub value: Vec<u8>,
        3 => pub ts: u64,
        4 => pub sr: u32,
    }
}

crate::message! {
    pub struct EcGet {
        1 => pub key: String [required],
    }
}

crate::message! {
    pub struct EcPut {
        1 => pub key: String [required],
        2 => pub value: Vec<u8>,
    }
}

crate::oneof! {
    pub enum EcClientMessage {
        1 => Get(EcGet),
        2 => Put(EcPut),
    }
}

crate::message! {
    pub struct EcReplicate {
        1 => pub record: Option<EcRecord>,
    }
}

crate::oneof! {
    pub enum EcServerMessage {
        1 => Replicate(EcReplicate),
    }
}

crate::message! {
    pub struct EcGetReply {
        1 => pub value: Vec<u8>,
        2 => pub ts: u64,
        3 => pub sr: u32,
    }
}

crate::message! {
    pub struct EcPutReply {
        1 => pub ts: u64,
    }
}

crate::message! {
    pub struct EcReply {
        1 => pub status: bool,
        2 => pub get: Option<EcGetReply>,
        3 => pub put: Option<EcPutReply>,
    }
}

/// Last-writer-wins; value bytes break exact `(ts, sr)` ties so the order is
/// total.
pub fn lww(a: &EcRecord, b: &EcRecord) -> Ordering {
    (a.ts, a.sr, &a.value).cmp(&(b.ts, b.sr, &b.value))
}

pub struct Eventual {
    placement: Placement,
    store: Storage<EcRecord>,
}

impl Eventual {
    pub fn storage(&self) -> &Storage<EcRecord> {
        &self.store
    }

    fn apply(&self, ctx: &dyn Context<Self>, rec: EcRecord) {
        let key = rec.key.clone();
        let value = rec.value.clone();
        if self.store.insert(&key, rec) == StorageStatus::Success {
            record_applied(ctx, &key, &value);
        }
    }
}

impl Protocol for Eventual {
    const NAME: &'static str = "eventual";
    type ServerMsg = EcServerMessage;
    type ClientMsg = EcClientMessage;
    type Reply = EcReply;
    type Client = EventualClient;

    fn build(config: &ServerConfig) -> Result<Self, ConfigError> {
        let store = Storage::open(&config.storage, lww).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Eventual { placement: Placement::from_config(config)?, store })
    }

    fn handle_client(&self, ctx: &dyn Context<Self>, agent: ReplyAgent, msg: EcClientMessage) {
        let m = self.placement.replica();
        let reply = match msg {
            EcClientMessage::Put(put) => {
                let rec = EcRecord { key: put.key.clone(), value: put.value, ts: ctx.now_ms(), sr: m };
                if self.store.replication_mode() == ReplicationMode::ServerCentric {
                    let sm = EcServerMessage::Replicate(EcReplicate { record: Some(rec.clone()) });
                    for peer in self.placement.peers() {
                        send_logged(ctx, peer, &sm);
                    }
                }
                let ts = rec.ts;
                record_put(ctx, agent.client_id, &put.key, &rec.value, (rec.ts, rec.sr as u64), None);
                match self.store.insert(&put.key, rec) {
                    StorageStatus::Success => EcReply { status: true, put: Some(EcPutReply { ts }), ..Default::default() },
                    _ => EcReply::default(),
                }
            }
            EcClientMessage::Get(get) => match self.store.latest(&get.key, |_| true) {
                Some(rec) => {
                    let returned = Returned { value: &rec.value, rank: (rec.ts, rec.sr as u64), ut: rec.ts, sr: rec.sr };
                    record_get(ctx, agent.client_id, &get.key, Some(returned), Vec::new());
                    EcReply {
                        status: true,
                        get: Some(EcGetReply { value: rec.value, ts: rec.ts, sr: rec.sr }),
                        ..Default::default()
                    }
                }
                None => {
                    record_get(ctx, agent.client_id, &get.key, None, Vec::new());
                    EcReply::default()
                }
            },
        };
        reply_logged(ctx, &agent, &reply);
    }

    fn handle_server(&self, ctx: &dyn Context<Self>, _from: NodeId, msg: EcServerMessage) {
        match msg {
            EcServerMessage::Replicate(EcReplicate { record: Some(rec) }) => self.apply(ctx, rec),
            EcServerMessage::Replicate(_) => log::warn!("{}: replicate without record", ctx.node()),
        }
    }

    fn store(&self) -> &dyn ReplicatedStore {
        &self.store
    }

    fn apply_storage_replica(&self, ctx: &dyn Context<Self>, _from: NodeId, _key: &str, record: &[u8]) {
        match EcRecord::decode(record) {
            Ok(rec) => {
                let key = rec.key.clone();
                let value = rec.value.clone();
                if self.store.apply_replicated(&key, record) == StorageStatus::Success {
                    record_applied(ctx, &key, &value);
                }
            }
            Err(e) => log::warn!("{}: bad storage replica: {e}", ctx.node()),
        }
    }

    fn classify(msg: &EcClientMessage) -> OpKind {
        match msg {
            EcClientMessage::Get(_) => OpKind::Get,
            EcClientMessage::Put(_) => OpKind::Put,
        }
    }

    fn heads(&self) -> BTreeMap<String, Vec<u8>> {
        self.store.heads().into_iter().map(|(k, r)| (k, r.encode())).collect()
    }
}

pub struct EventualClient {
    setup: ClientSetup,
}

impl ProtocolClient for EventualClient {
    type Protocol = Eventual;

    fn new(setup: ClientSetup) -> Self {
        EventualClient { setup }
    }

    fn setup(&self) -> &ClientSetup {
        &self.setup
    }

    fn put_request(&mut self, key: &str, value: Vec<u8>) -> EcClientMessage {
        EcClientMessage::Put(EcPut { key: key.to_string(), value })
    }

    fn put_complete(&mut self, reply: EcReply) -> Result<PutOutcome, ClientError> {
        match reply.put {
            Some(p) if reply.status => Ok(PutOutcome { meta: format!("ts={}", p.ts) }),
            _ if !reply.status => Err(ClientError::Failed),
            _ => Err(ClientError::UnexpectedReply),
        }
    }

    fn get_request(&mut self, key: &str) -> EcClientMessage {
        EcClientMessage::Get(EcGet { key: key.to_string() })
    }

    fn get_complete(&mut self, reply: EcReply) -> Result<GetOutcome, ClientError> {
        match reply.get {
            Some(g) if reply.status => Ok(GetOutcome { meta: format!("ts={} sr={}", g.ts, g.sr), value: Some(g.value) }),
            None if !reply.status => Ok(GetOutcome { value: None, meta: String::new() }),
            _ => Err(ClientError::UnexpectedReply),
        }
    }
}
