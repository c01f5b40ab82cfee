//! Named deterministic random streams derived from the run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a.
    let mut h = 0xcbf29ce484222325u64;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Seed for the stream `(root, tag, index)`.
pub fn derive(root: u64, tag: &str, index: u64) -> u64 {
    splitmix(splitmix(root ^ tag_hash(tag)).wrapping_add(index))
}

/// ChaCha stream for `(root, tag, index)`.
pub fn stream(root: u64, tag: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive(root, tag, index))
}
