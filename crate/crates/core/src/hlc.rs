//! Hybrid logical clock packed into one `u64`: 48 bits of physical
//! milliseconds and a 16-bit logical counter.

use std::fmt;

const COUNTER_BITS: u32 = 16;
const COUNTER_MASK: u64 = (1 << COUNTER_BITS) - 1;
pub const MAX_PHYSICAL: u64 = (1 << 48) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum HlcError {
    #[error("logical counter overflow at l={0}")]
    CounterOverflow(u64),
    #[error("physical time {0} exceeds 48 bits")]
    PhysicalOverflow(u64),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hlc(u64);

impl Hlc {
    pub const ZERO: Hlc = Hlc(0);

    pub fn new(l: u64, c: u32) -> Result<Hlc, HlcError> {
        if l > MAX_PHYSICAL {
            return Err(HlcError::PhysicalOverflow(l));
        }
        if c as u64 > COUNTER_MASK {
            return Err(HlcError::CounterOverflow(l));
        }
        Ok(Hlc((l << COUNTER_BITS) | c as u64))
    }

    pub const fn from_u64(raw: u64) -> Hlc {
        Hlc(raw)
    }

    pub const fn as_u64(self) -> u64 {
        self.0
    }

    pub const fn l(self) -> u64 {
        self.0 >> COUNTER_BITS
    }

    pub const fn c(self) -> u32 {
        (self.0 & COUNTER_MASK) as u32
    }

    /// Local or send event at physical time `now`.
    pub fn tick(self, now: u64) -> Result<Hlc, HlcError> {
        let l = self.l().max(now);
        let c = if l == self.l() { self.c() + 1 } else { 0 };
        Hlc::new(l, c)
    }

    /// Receive event carrying `remote`, at physical time `now`.
    pub fn merge(self, remote: Hlc, now: u64) -> Result<Hlc, HlcError> {
        let l = self.l().max(remote.l()).max(now);
        let c = match (l == self.l(), l == remote.l()) {
            (true, true) => self.c().max(remote.c()) + 1,
            (false, true) => remote.c() + 1,
            (true, false) => self.c() + 1,
            (false, false) => 0,
        };
        Hlc::new(l, c)
    }
}

impl fmt::Debug for Hlc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.l(), self.c())
    }
}

impl fmt::Display for Hlc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.l(), self.c())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn h(l: u64, c: u32) -> Hlc {
        Hlc::new(l, c).unwrap()
    }

    #[test]
    fn tick_rules() {
        assert_eq!(h(10, 2).tick(10).unwrap(), h(10, 3));
        assert_eq!(h(10, 2).tick(8).unwrap(), h(10, 3));
        assert_eq!(h(10, 2).tick(12).unwrap(), h(12, 0));
    }

    #[test]
    fn merge_rules() {
        assert_eq!(h(10, 2).merge(h(10, 4), 9).unwrap(), h(10, 5));
        assert_eq!(h(10, 7).merge(h(10, 4), 9).unwrap(), h(10, 8));
        assert_eq!(h(5, 2).merge(h(10, 4), 9).unwrap(), h(10, 5));
        assert_eq!(h(10, 2).merge(h(5, 4), 9).unwrap(), h(10, 3));
        assert_eq!(h(10, 2).merge(h(5, 4), 20).unwrap(), h(20, 0));
    }

    #[test]
    fn packing() {
        let t = h(0x1234_5678_9abc, 0xfedc);
        assert_eq!(t.l(), 0x1234_5678_9abc);
        assert_eq!(t.c(), 0xfedc);
        assert_eq!(Hlc::from_u64(t.as_u64()), t);
        assert!(h(3, 9) < h(4, 0));
    }

    #[test]
    fn overflow_is_an_error() {
        let top = h(10, u16::MAX as u32);
        assert_eq!(top.tick(10), Err(HlcError::CounterOverflow(10)));
        assert_eq!(top.tick(11).unwrap(), h(11, 0));
        assert!(Hlc::new(MAX_PHYSICAL + 1, 0).is_err());
    }

    /// Brute-force scan: every output exceeds both inputs and stays within
    /// the largest skew injected into remote stamps.
    #[test]
    fn random_sequences_are_monotone_and_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut clock = Hlc::ZERO;
        let mut now = 1_000u64;
        let max_skew = 50u64;
        for _ in 0..10_000 {
            now += rng.random_range(0..3);
            let next = if rng.random_bool(0.5) {
                clock.tick(now).unwrap()
            } else {
                let remote_l = now + rng.random_range(0..=max_skew);
                let remote = h(remote_l, rng.random_range(0..100));
                let merged = clock.merge(remote, now).unwrap();
                assert!(merged > remote);
                merged
            };
            assert!(next > clock);
            assert!(next.l() >= now);
            assert!(next.l() <= now + max_skew, "l={} now={now}", next.l());
            clock = next;
        }
    }
}
