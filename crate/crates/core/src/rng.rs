//! Counter-based seed derivation.
//!
//! Every random stream is keyed by `(seed, index, tag)` so work items can be
//! generated in any order or in parallel without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a; stable across platforms and releases.
fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(seed: u64, index: u64, tag: &str) -> u64 {
    splitmix64(splitmix64(seed ^ tag_hash(tag)).wrapping_add(splitmix64(index)))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, index: u64, tag: &str) -> Rng {
    seeded(derive_seed(seed, index, tag))
}
