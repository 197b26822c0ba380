//! Seed derivation.
//!
//! Every experiment is driven by one root seed. Components never share a
//! generator; each asks for its own stream by label:
//!
//! ```text
//! seed(root, label) = splitmix64(splitmix64(root) ^ fnv1a64(label))
//! ```
//!
//! Labels in use: `"dataset"`, `"surrogate"`, `"sobol-init"`, `"critic-init"`,
//! `"critic/<t>"`, `"ascr"`, `"acquire"`, `"anneal"`, `"landscape"`,
//! `"patient/<i>"`. Streams are ChaCha8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Derives the seed of the component stream `label` from `root`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix64(splitmix64(root) ^ fnv1a64(label.as_bytes()))
}

/// Opens the component stream `label` of `root`.
pub fn stream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}
