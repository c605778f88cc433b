//! Embedded version-chain store.
//!
//! Each key maps to a chain of records kept newest-first under a
//! protocol-supplied comparator. In single-version mode a chain holds at most
//! one record. An optional append-only log makes inserts durable and is
//! replayed on open.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};

use parking_lot::{Mutex, RwLock};

use crate::codec::{read_frames, write_frame, DecodeError, Message};
use crate::config::{ReplicationMode, StorageSettings, Versioning};

crate::message! {
    /// One persisted insert.
    pub struct LogEntry {
        1 => pub key: String [required],
        2 => pub record: Vec<u8>,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageStatus {
    Success,
    /// The key has no versions at all.
    NotFound,
    Failure,
}

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("storage log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("storage log corrupt: {0}")]
    Corrupt(#[from] DecodeError),
}

/// Orders two versions of one key; `Greater` means newer.
pub type Comparator<R> = fn(&R, &R) -> Ordering;

/// Minimal byte-level engine contract.
pub trait StorageDriver: Send + Sync {
    fn put(&self, key: &str, value: &[u8]) -> StorageStatus;
    /// Encoded newest version.
    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StorageStatus>;
}

/// Object-safe view the kernel uses for storage-centric replication.
pub trait ReplicatedStore: Send + Sync {
    fn replication_mode(&self) -> ReplicationMode;
    /// Writes accepted since the last call, to forward to ring successors.
    fn take_replication(&self) -> Vec<(String, Vec<u8>)>;
    /// Inserts a record forwarded by a peer engine; never re-forwarded.
    fn apply_replicated(&self, key: &str, record: &[u8]) -> StorageStatus;
}

struct Log {
    out: BufWriter<File>,
    flush: bool,
}

pub struct Storage<R> {
    versioning: Versioning,
    replication: ReplicationMode,
    cmp: Comparator<R>,
    chains: RwLock<BTreeMap<String, Vec<R>>>,
    log: Option<Mutex<Log>>,
    closed: AtomicBool,
    outbox: Mutex<Vec<(String, Vec<u8>)>>,
}

impl<R: Message + Clone + PartialEq> Storage<R> {
    pub fn in_memory(versioning: Versioning, cmp: Comparator<R>) -> Self {
        Storage {
            versioning,
            replication: ReplicationMode::ServerCentric,
            cmp,
            chains: RwLock::new(BTreeMap::new()),
            log: None,
            closed: AtomicBool::new(false),
            outbox: Mutex::new(Vec::new()),
        }
    }

    /// Opens per `settings`, replaying the log if one is configured.
    pub fn open(settings: &StorageSettings, cmp: Comparator<R>) -> Result<Self, StorageError> {
        let mut store = Self::in_memory(settings.versioning, cmp);
        store.replication = settings.replication;
        if let Some(path) = &settings.log_path {
            store.replay(path)?;
            let file = OpenOptions::new().create(true).append(true).open(path)?;
            store.log = Some(Mutex::new(Log { out: BufWriter::new(file), flush: settings.flush_on_insert }));
        }
        Ok(store)
    }

    fn replay(&self, path: &Path) -> Result<(), StorageError> {
        let mut bytes = Vec::new();
        match File::open(path) {
            Ok(mut f) => f.read_to_end(&mut bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        for frame in read_frames(&bytes)? {
            let entry = LogEntry::decode(frame)?;
            let rec = R::decode(&entry.record)?;
            self.place(&entry.key, rec);
        }
        Ok(())
    }

    pub fn versioning(&self) -> Versioning {
        self.versioning
    }

    /// Adds `rec` to the chain of `key`. Re-inserting an identical record is
    /// a no-op, which makes replicated applies idempotent.
    pub fn insert(&self, key: &str, rec: R) -> StorageStatus {
        if self.closed.load(AtomicOrdering::Acquire) {
            return StorageStatus::Failure;
        }
        // Logging happens under the chain lock so log order matches apply order.
        let mut chains = self.chains.write();
        let chain = chains.entry(key.to_string()).or_default();
        if chain.contains(&rec) {
            return StorageStatus::Success;
        }
        if let Some(log) = &self.log {
            let entry = LogEntry { key: key.to_string(), record: rec.encode() };
            let mut frame = Vec::new();
            write_frame(&entry.encode(), &mut frame);
            let mut log = log.lock();
            let written = log.out.write_all(&frame).and_then(|_| if log.flush { log.out.flush() } else { Ok(()) });
            if let Err(e) = written {
                log::error!("storage log write failed: {e}");
                return StorageStatus::Failure;
            }
        }
        if self.replication == ReplicationMode::StorageCentric {
            self.outbox.lock().push((key.to_string(), rec.encode()));
        }
        Self::place_in(chain, rec, self.versioning, self.cmp);
        StorageStatus::Success
    }

    fn place(&self, key: &str, rec: R) {
        let mut chains = self.chains.write();
        let chain = chains.entry(key.to_string()).or_default();
        if !chain.contains(&rec) {
            Self::place_in(chain, rec, self.versioning, self.cmp);
        }
    }

    fn place_in(chain: &mut Vec<R>, rec: R, versioning: Versioning, cmp: Comparator<R>) {
        match versioning {
            Versioning::Single => {
                chain.clear();
                chain.push(rec);
            }
            Versioning::Multi => {
                let pos = chain.partition_point(|existing| cmp(existing, &rec) != Ordering::Less);
                chain.insert(pos, rec);
            }
        }
    }

    /// Appends versions of `key` satisfying `pred` to `out`, newest first.
    pub fn read(&self, key: &str, pred: impl Fn(&R) -> bool, out: &mut Vec<R>) -> StorageStatus {
        if self.closed.load(AtomicOrdering::Acquire) {
            return StorageStatus::Failure;
        }
        let chains = self.chains.read();
        match chains.get(key) {
            None => StorageStatus::NotFound,
            Some(chain) => {
                out.extend(chain.iter().filter(|r| pred(r)).cloned());
                StorageStatus::Success
            }
        }
    }

    /// Newest version satisfying `pred`.
    pub fn latest(&self, key: &str, pred: impl Fn(&R) -> bool) -> Option<R> {
        self.chains.read().get(key).and_then(|c| c.iter().find(|r| pred(r)).cloned())
    }

    pub fn contains(&self, key: &str, pred: impl Fn(&R) -> bool) -> bool {
        self.chains.read().get(key).is_some_and(|c| c.iter().any(pred))
    }

    pub fn chain(&self, key: &str) -> Vec<R> {
        self.chains.read().get(key).cloned().unwrap_or_default()
    }

    /// Newest version of every key.
    pub fn heads(&self) -> BTreeMap<String, R> {
        self.chains
            .read()
            .iter()
            .filter_map(|(k, c)| c.first().map(|r| (k.clone(), r.clone())))
            .collect()
    }

    pub fn key_count(&self) -> usize {
        self.chains.read().len()
    }

    pub fn flush(&self) -> Result<(), StorageError> {
        if let Some(log) = &self.log {
            log.lock().out.flush()?;
        }
        Ok(())
    }

    /// Flushes and rejects further operations.
    pub fn close(&self) -> Result<(), StorageError> {
        self.closed.store(true, AtomicOrdering::Release);
        self.flush()
    }
}

impl<R: Message + Clone + PartialEq + Send + Sync> StorageDriver for Storage<R> {
    fn put(&self, key: &str, value: &[u8]) -> StorageStatus {
        match R::decode(value) {
            Ok(rec) => self.insert(key, rec),
            Err(_) => StorageStatus::Failure,
        }
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StorageStatus> {
        if self.closed.load(AtomicOrdering::Acquire) {
            return Err(StorageStatus::Failure);
        }
        Ok(self.latest(key, |_| true).map(|r| r.encode()))
    }
}

impl<R: Message + Clone + PartialEq + Send + Sync> ReplicatedStore for Storage<R> {
    fn replication_mode(&self) -> ReplicationMode {
        self.replication
    }

    fn take_replication(&self) -> Vec<(String, Vec<u8>)> {
        std::mem::take(&mut *self.outbox.lock())
    }

    fn apply_replicated(&self, key: &str, record: &[u8]) -> StorageStatus {
        if self.closed.load(AtomicOrdering::Acquire) {
            return StorageStatus::Failure;
        }
        match R::decode(record) {
            Ok(rec) => {
                self.place(key, rec);
                StorageStatus::Success
            }
            Err(_) => StorageStatus::Failure,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    crate::message! {
        struct Rec {
            1 => ut: u64,
            2 => sr: u32,
        }
    }

    fn by_ut(a: &Rec, b: &Rec) -> Ordering {
        (a.ut, a.sr).cmp(&(b.ut, b.sr))
    }

    fn rec(ut: u64) -> Rec {
        Rec { ut, sr: 0 }
    }

    #[test]
    fn multi_version_orders_newest_first() {
        let s = Storage::in_memory(Versioning::Multi, by_ut);
        s.insert("k", rec(5));
        s.insert("k", rec(3));
        s.insert("k", rec(9));
        assert_eq!(s.chain("k").iter().map(|r| r.ut).collect::<Vec<_>>(), vec![9, 5, 3]);
    }

    #[test]
    fn single_version_replaces() {
        let s = Storage::in_memory(Versioning::Single, by_ut);
        s.insert("k", rec(5));
        s.insert("k", rec(3));
        assert_eq!(s.chain("k"), vec![rec(3)]);
    }

    #[test]
    fn read_statuses() {
        let s = Storage::in_memory(Versioning::Multi, by_ut);
        let mut out = Vec::new();
        assert_eq!(s.read("k", |_| true, &mut out), StorageStatus::NotFound);
        s.insert("k", rec(30));
        s.insert("k", rec(80));
        assert_eq!(s.read("k", |_| false, &mut out), StorageStatus::Success);
        assert!(out.is_empty());
        assert_eq!(s.read("k", |r| r.ut <= 50, &mut out), StorageStatus::Success);
        assert_eq!(out, vec![rec(30)]);
        out.clear();
        s.read("k", |_| true, &mut out);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn duplicate_insert_is_idempotent() {
        let s = Storage::in_memory(Versioning::Multi, by_ut);
        s.insert("k", rec(1));
        s.insert("k", rec(1));
        assert_eq!(s.chain("k").len(), 1);
    }

    #[test]
    fn closed_engine_fails() {
        let s = Storage::in_memory(Versioning::Multi, by_ut);
        s.close().unwrap();
        assert_eq!(s.insert("k", rec(1)), StorageStatus::Failure);
        assert_eq!(s.read("k", |_| true, &mut Vec::new()), StorageStatus::Failure);
    }

    #[test]
    fn log_replays_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let settings = StorageSettings {
            log_path: Some(dir.path().join("data.log")),
            flush_on_insert: true,
            ..Default::default()
        };
        {
            let s = Storage::open(&settings, by_ut).unwrap();
            s.insert("a", rec(1));
            s.insert("a", rec(2));
            s.insert("b", rec(7));
            s.close().unwrap();
        }
        let s = Storage::<Rec>::open(&settings, by_ut).unwrap();
        assert_eq!(s.chain("a"), vec![rec(2), rec(1)]);
        assert_eq!(s.heads().len(), 2);
    }

    #[test]
    fn storage_centric_collects_outbox() {
        let settings = StorageSettings { replication: ReplicationMode::StorageCentric, ..Default::default() };
        let a = Storage::open(&settings, by_ut).unwrap();
        let b = Storage::<Rec>::open(&settings, by_ut).unwrap();
        a.insert("k", rec(4));
        let out = a.take_replication();
        assert_eq!(out.len(), 1);
        for (k, bytes) in &out {
            b.apply_replicated(k, bytes);
        }
        assert_eq!(b.chain("k"), vec![rec(4)]);
        assert!(b.take_replication().is_empty(), "applied replicas are not forwarded again");
        let plain = Storage::in_memory(Versioning::Multi, by_ut);
        plain.insert("k", rec(1));
        assert!(plain.take_replication().is_empty());
    }

    #[test]
    fn driver_put_get() {
        let s = Storage::in_memory(Versioning::Single, by_ut);
        assert_eq!(StorageDriver::put(&s, "k", &rec(3).encode()), StorageStatus::Success);
        assert_eq!(StorageDriver::get(&s, "k").unwrap(), Some(rec(3).encode()));
        assert_eq!(StorageDriver::put(&s, "k", &[0xff]), StorageStatus::Failure);
    }

    #[test]
    fn random_inserts_match_sort_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let s = Storage::in_memory(Versioning::Multi, by_ut);
        let mut all = Vec::new();
        for _ in 0..10_000 {
            let r = Rec { ut: rng.random_range(0..100_000), sr: rng.random_range(0..3) };
            if !all.contains(&r) {
                all.push(r.clone());
            }
            s.insert("k", r);
        }
        all.sort_by_key(|r| std::cmp::Reverse((r.ut, r.sr)));
        assert_eq!(s.chain("k"), all);
    }

    proptest! {
        #[test]
        fn comparator_is_total_order(a in (0u64..5, 0u32..3), b in (0u64..5, 0u32..3), c in (0u64..5, 0u32..3)) {
            let (a, b, c) = (Rec { ut: a.0, sr: a.1 }, Rec { ut: b.0, sr: b.1 }, Rec { ut: c.0, sr: c.1 });
            prop_assert_eq!(by_ut(&a, &b), by_ut(&b, &a).reverse());
            if by_ut(&a, &b) != Ordering::Greater && by_ut(&b, &c) != Ordering::Greater {
                prop_assert_ne!(by_ut(&a, &c), Ordering::Greater);
            }
        }
    }
}
