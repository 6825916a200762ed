//! Seed derivation.
//!
//! Every randomized stage draws from a [`rand_chacha::ChaCha8Rng`] seeded
//! through [`derive_seed`], so any stage can be re-run in isolation and
//! reproduce the exact stream it saw inside a full run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Bijective on `u64`, good avalanche behavior.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a string tag by folding the
/// tag bytes through SplitMix64. Distinct tags give independent streams.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut s = splitmix64(master);
    for b in tag.bytes() {
        s = splitmix64(s ^ u64::from(b));
    }
    s
}

/// Derives a child seed for a node addressed by a path of integer
/// components (e.g. a cluster-tree path). Order-sensitive.
pub fn derive_path_seed(master: u64, path: &[u32]) -> u64 {
    let mut s = splitmix64(master);
    for &c in path {
        s = splitmix64(s ^ (u64::from(c) + 1));
    }
    s
}

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
