//! Derived random streams. Every stage that needs randomness gets its own
//! generator keyed by (run seed, stage tag), so adding or reordering stages
//! never shifts another stage's draws.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

pub fn seed_stream(seed: u64, tag: &str) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(b"ornk.rng");
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha12Rng::from_seed(digest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_stable_and_distinct() {
        let a: u64 = seed_stream(7, "shuffle.e0").random();
        let b: u64 = seed_stream(7, "shuffle.e0").random();
        let c: u64 = seed_stream(7, "shuffle.e1").random();
        let d: u64 = seed_stream(8, "shuffle.e0").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
