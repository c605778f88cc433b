//! Fixtures shared by the criterion benchmarks in `benches/`.
//!
//! Run with `cargo bench -p protokv-bench`; pass a filter to run one group,
//! e.g. `cargo bench -p protokv-bench --bench codec -- replicate`.

use protokv::config::Versioning;
use protokv::protocols::cops::{CopsRecord, CopsReplicate, Dependency};
use protokv::protocols::gentlerain::PutMessage;
use protokv::storage::Storage;

pub fn value(size: usize) -> Vec<u8> {
    (0..size).map(|i| (i * 31 % 251) as u8).collect()
}

/// Replication message carrying `deps` explicit dependencies.
pub fn cops_replicate(deps: usize, value_size: usize) -> CopsReplicate {
    CopsReplicate {
        record: Some(CopsRecord { key: "user000042".into(), value: value(value_size), lamport: 1_000_000, sr: 1 }),
        deps: (0..deps)
            .map(|i| Dependency { key: format!("user{i:06}"), lamport: 999_000 + i as u64, sr: (i % 2) as u32 })
            .collect(),
    }
}

pub fn gentlerain_put(value_size: usize) -> PutMessage {
    PutMessage { key: "user000042".into(), value: value(value_size), dt: 1_700_000_000_000_000 }
}

/// Multi-version store with `keys` keys of `versions` versions each.
pub fn cops_store(keys: usize, versions: u64) -> Storage<CopsRecord> {
    let s = Storage::in_memory(Versioning::Multi, |a: &CopsRecord, b: &CopsRecord| {
        (a.lamport, a.sr).cmp(&(b.lamport, b.sr))
    });
    for k in 0..keys {
        let key = format!("user{k:06}");
        for v in 1..=versions {
            s.insert(&key, CopsRecord { key: key.clone(), value: value(64), lamport: v, sr: 0 });
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shape() {
        assert_eq!(cops_replicate(5, 8).deps.len(), 5);
        assert_eq!(gentlerain_put(64).value.len(), 64);
        let s = cops_store(3, 4);
        assert_eq!(s.key_count(), 3);
        assert_eq!(s.chain("user000001").len(), 4);
    }
}
