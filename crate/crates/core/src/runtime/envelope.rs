//! Frames exchanged between kernels and clients.

crate::message! {
    /// Protocol message between servers, sequenced per channel.
    pub struct ServerFrame {
        1 => pub seq: u64,
        2 => pub source: String [required],
        3 => pub payload: Vec<u8>,
    }
}

crate::message! {
    /// Record forwarded by a storage engine in storage-centric mode. Shares
    /// the channel sequence space with [`ServerFrame`].
    pub struct StorageFrame {
        1 => pub seq: u64,
        2 => pub source: String [required],
        3 => pub key: String,
        4 => pub record: Vec<u8>,
    }
}

crate::message! {
    pub struct ClientFrame {
        1 => pub request_id: u64,
        2 => pub client_id: u64,
        3 => pub payload: Vec<u8>,
    }
}

crate::message! {
    pub struct ReplyFrame {
        1 => pub request_id: u64,
        2 => pub payload: Vec<u8>,
    }
}

crate::message! {
    /// First frame on a server-to-server connection.
    pub struct Hello {
        1 => pub source: String [required],
    }
}

crate::message! {
    /// Cumulative acknowledgement: every sequence number up to `seq` arrived.
    pub struct Ack {
        1 => pub source: String [required],
        2 => pub seq: u64,
    }
}

crate::message! {
    pub struct Ping {
        1 => pub nonce: u64,
        2 => pub sent_us: u64,
    }
}

crate::message! {
    pub struct Pong {
        1 => pub nonce: u64,
        2 => pub sent_us: u64,
    }
}

crate::message! {
    pub struct StatusRequest {}
}

crate::message! {
    pub struct PeerStatus {
        1 => pub node: String,
        2 => pub connected: bool,
        3 => pub queue_depth: u64,
        4 => pub rtt_us: u64,
        5 => pub sent: u64,
    }
}

crate::message! {
    pub struct StatusReport {
        1 => pub node: String,
        2 => pub protocol: String,
        3 => pub uptime_ms: u64,
        4 => pub clients_connected: u64,
        5 => pub peers: Vec<PeerStatus>,
        6 => pub dropped_envelopes: u64,
        7 => pub handler_panics: u64,
    }
}

crate::oneof! {
    pub enum Envelope {
        1 => Server(ServerFrame),
        2 => Client(ClientFrame),
        3 => Reply(ReplyFrame),
        4 => Hello(Hello),
        5 => Ack(Ack),
        6 => Ping(Ping),
        7 => Pong(Pong),
        8 => StatusRequest(StatusRequest),
        9 => Status(StatusReport),
        10 => Storage(StorageFrame),
    }
}

impl Envelope {
    pub fn kind(&self) -> &'static str {
        match self {
            Envelope::Server(_) => "server_message",
            Envelope::Client(_) => "client_message",
            Envelope::Reply(_) => "client_reply",
            Envelope::Hello(_) => "hello",
            Envelope::Ack(_) => "ack",
            Envelope::Ping(_) => "ping",
            Envelope::Pong(_) => "pong",
            Envelope::StatusRequest(_) => "status_request",
            Envelope::Status(_) => "status",
            Envelope::Storage(_) => "storage_replicate",
        }
    }

    /// Channel sequence number of sequenced frames.
    pub fn seq(&self) -> Option<u64> {
        match self {
            Envelope::Server(f) => Some(f.seq),
            Envelope::Storage(f) => Some(f.seq),
            _ => None,
        }
    }
}
