//! Derived random streams keyed by a base seed and a path of integers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stateless 64-bit mixer used to derive independent per-image seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let s = parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ p));
    ChaCha8Rng::seed_from_u64(s)
}
