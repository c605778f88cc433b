//! Operation histories recorded by servers for offline checking.
//!
//! Every written value starts with an 8-byte little-endian tag that is unique
//! per write (see [`value_tag`]); a version is identified by its key and tag.
//! Events are appended in a single global order, so the position of an event
//! in a [`History`] is its logical trace index.

use std::io::Write;
use std::path::Path;

use crate::codec::{read_frames, write_frame, DecodeError, Message};

crate::message! {
    /// A version named by tag, or by rank when the tag is unknown (zero).
    pub struct VersionRef {
        1 => pub key: String,
        2 => pub id: u64,
        3 => pub rank_hi: u64,
        4 => pub rank_lo: u64,
    }
}

crate::message! {
    /// A write accepted at its origin node.
    pub struct PutEvent {
        1 => pub session: u64,
        2 => pub node: String,
        3 => pub key: String,
        4 => pub version: u64,
        /// Protocol ordering of versions of one key, high word first.
        5 => pub rank_hi: u64,
        6 => pub rank_lo: u64,
        /// Dependencies declared by the protocol, when it tracks them.
        7 => pub explicit_deps: Vec<VersionRef>,
        8 => pub has_explicit_deps: bool,
    }
}

crate::message! {
    pub struct GetEvent {
        1 => pub session: u64,
        2 => pub node: String,
        3 => pub key: String,
        /// Zero when nothing was returned.
        4 => pub version: u64,
        5 => pub rank_hi: u64,
        6 => pub rank_lo: u64,
        /// Update time and source replica of the returned version.
        7 => pub ut: u64,
        8 => pub sr: u32,
        /// Stable time (one entry) or stable vector at reply time.
        9 => pub stable: Vec<u64>,
    }
}

crate::message! {
    /// A version became stored at a node.
    pub struct AppliedEvent {
        1 => pub node: String,
        2 => pub key: String,
        3 => pub version: u64,
    }
}

crate::oneof! {
    pub enum HistoryEvent {
        1 => Put(PutEvent),
        2 => Get(GetEvent),
        3 => Applied(AppliedEvent),
        /// A stored but pending version became readable.
        4 => Visible(AppliedEvent),
    }
}

/// Tag stored in the first 8 bytes of a value; zero for short values.
pub fn value_tag(value: &[u8]) -> u64 {
    match value.get(..8) {
        Some(head) => u64::from_le_bytes(head.try_into().expect("8 bytes")),
        None => 0,
    }
}

/// Tag for the `seq`-th write of `session`.
pub fn make_tag(session: u64, seq: u64) -> u64 {
    ((session + 1) << 40) | (seq & ((1 << 40) - 1))
}

/// Value of `size` bytes (at least 8) carrying `tag`.
pub fn tagged_value(tag: u64, size: usize) -> Vec<u8> {
    let mut v = tag.to_le_bytes().to_vec();
    v.resize(size.max(8), b'x');
    v
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub events: Vec<HistoryEvent>,
}

impl History {
    pub fn push(&mut self, event: HistoryEvent) {
        self.events.push(event);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for event in &self.events {
            write_frame(&event.encode(), &mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let events = read_frames(bytes)?.into_iter().map(HistoryEvent::decode).collect::<Result<_, _>>()?;
        Ok(History { events })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        f.flush()
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        History::decode(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
