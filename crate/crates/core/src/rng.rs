//! Deterministic, hierarchical random-number seeding.
//!
//! Every stochastic decision in the pipeline (init, shuffling, augmentation,
//! dropout, synthetic geometry) draws from a generator derived from the global
//! seed plus a purpose tag and counters, never from a long-lived mutable RNG.
//! Two consequences we rely on:
//!
//! * parallel and serial execution produce identical outputs (each unit of work
//!   derives its own stream), and
//! * resuming a run needs only the counters (epoch, step), not serialized RNG
//!   state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Domain tags keeping independent consumers off each other's streams.
pub mod tag {
    pub const INIT: u64 = 0x01;
    pub const SYNTH_PATIENT: u64 = 0x02;
    pub const SHUFFLE: u64 = 0x03;
    pub const AUGMENT: u64 = 0x04;
    pub const DROPOUT: u64 = 0x05;
    pub const SPLIT: u64 = 0x06;
    pub const TEST: u64 = 0x7f;
}

/// SplitMix64 finalizer; the standard 64-bit avalanche mix.
#[inline]
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a seed with a sequence of tags/counters into one stream key.
pub fn derive_key(seed: u64, tags: &[u64]) -> u64 {
    let mut k = mix(seed);
    for &t in tags {
        k = mix(k ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    k
}

/// Deterministic generator for a (seed, tags) combination.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_key(seed, tags))
}

/// FNV-1a hash of a string, used to give named entities (patient ids) their
/// own deterministic streams regardless of generation order.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let mut a = derive_rng(7, &[tag::TEST, 1]);
        let mut a2 = derive_rng(7, &[tag::TEST, 1]);
        let mut b = derive_rng(7, &[tag::TEST, 2]);
        let xa: u64 = a.random();
        let xa2: u64 = a2.random();
        let xb: u64 = b.random();
        assert_eq!(xa, xa2);
        assert_ne!(xa, xb);
    }

    #[test]
    fn string_hash_differs_between_ids() {
        assert_ne!(hash_str("patient_0001"), hash_str("patient_0002"));
    }
}
