//! Hierarchical seed derivation.
//!
//! Every run hangs off a single root seed; subsystems derive their own streams
//! with a label and an index so that adding a consumer never shifts the
//! randomness seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed, a stream label, and an index.
pub fn derive(root: u64, label: &str, index: u64) -> u64 {
    let mixed = root
        ^ fnv1a(label.as_bytes()).rotate_left(17)
        ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    splitmix(mixed)
}

/// ChaCha stream for a derived seed.
pub fn rng(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label, index))
}

/// Content hash for token sequences, used to tie per-sample streams to the
/// sequence itself rather than its position in a list.
pub fn hash_tokens(tokens: &[u32]) -> u64 {
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    fnv1a(&bytes)
}
