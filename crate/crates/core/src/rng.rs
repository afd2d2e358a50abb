//! Seed derivation.
//!
//! All randomness comes from ChaCha8 (a counter-based generator with a
//! documented, platform-independent output stream). Per-item generators are
//! keyed by `(master seed, string key)` and split into numbered streams so
//! the draws for one utterance never depend on how many other utterances
//! were processed before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the UTF-8 bytes of `key`.
pub fn hash_key(key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, key: &str) -> u64 {
    mix(seed ^ mix(hash_key(key)))
}

/// Generator for stream `stream` of item `key` under master `seed`.
pub fn stream_rng(seed: u64, key: &str, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, key));
    rng.set_stream(stream);
    rng
}
