//! Seed derivation. Every stochastic component draws from its own stream
//! keyed by (run seed, purpose tag, index) so that adding or removing one
//! consumer never perturbs the draws seen by another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An independent ChaCha8 stream for `(seed, tag, idx)`.
pub fn derived_rng(seed: u64, tag: &str, idx: u64) -> ChaCha8Rng {
    let t = fnv1a(tag);
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&t.to_le_bytes());
    key[16..24].copy_from_slice(&idx.to_le_bytes());
    key[24..32].copy_from_slice(&splitmix64(seed ^ t ^ idx).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
