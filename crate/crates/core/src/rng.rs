//! Labelled random streams derived from a single root seed.
//!
//! Every consumer of randomness (initialisation, splits, shuffles, candidate
//! draws, augmentation noise, diagnostics) gets its own stream keyed by a label
//! and a path of indices, so adding a consumer never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derives the 64-bit key for `(root, label, path)`.
pub fn derive_key(root: u64, label: &str, path: &[u64]) -> u64 {
    let mut k = splitmix64(root ^ label_hash(label));
    for &p in path {
        k = splitmix64(k ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    k
}

pub fn stream(root: u64, label: &str, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_key(root, label, path))
}
