//! Deterministic derivation of independent RNG streams from a single seed.
//!
//! Every random draw in the crate flows from a top-level seed through
//! [`stream`], so parallel and serial execution see the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a; stable across platforms and compiler versions, unlike `DefaultHasher`.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mix a seed with a sequence of stream tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(seed);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    s
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
