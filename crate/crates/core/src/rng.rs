//! Seed derivation.
//!
//! All randomness starts from one user-supplied `u64`. Streams for a
//! particular purpose are derived as
//! `child = splitmix64(parent ^ splitmix64(fnv1a(label)) ^ splitmix64(index + 1))`
//! and then feed a ChaCha8 generator. Streams are never shared between
//! purposes, so adding draws in one place does not shift another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derive a child seed for `(label, index)` under `parent`.
pub fn derive(parent: u64, label: &str, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(fnv1a(label)) ^ splitmix64(index.wrapping_add(1)))
}

/// Generator for a derived stream.
pub fn stream(parent: u64, label: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(parent, label, index))
}
