//! Seeded random streams.
//!
//! Every random draw in the crate comes from one user seed. Components get
//! their own stream derived from the seed and a stable hash of the component
//! name, so adding a draw in one component never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn stable_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn substream(seed: u64, component: &str) -> Rng {
    let mixed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stable_hash(component);
    ChaCha8Rng::seed_from_u64(mixed)
}
