//! Seed derivation and deterministic RNG streams.
//!
//! Every stochastic component in the crate derives its randomness from a
//! 64-bit seed mixed with structural identifiers (user id, date, step index).
//! The mixer is a fixed splitmix64 fold, so streams are stable across
//! platforms and independent of scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Folds a sequence of 64-bit parts into one stable seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x51c6_4b21_9c1a_bb8d_u64;
    for &p in parts {
        acc = splitmix64(acc ^ p.wrapping_mul(0xff51_afd7_ed55_8ccd));
    }
    splitmix64(acc)
}

/// Deterministic RNG stream for a derived seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
