//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), which
//! produces the same stream on every platform. A run is keyed by a 64-bit
//! seed; independent streams for a (case, sample) pair, or for a slab of a
//! noise field, are selected with ChaCha's 64-bit stream id instead of being
//! drawn from one shared generator. Results therefore do not depend on the
//! order in which samples or slabs are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a list of indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed), |acc, &k| mix64(acc ^ mix64(k)))
}

/// Generator for stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for Monte Carlo sample `sample` of case `case`.
pub fn sample_stream(seed: u64, case: u64, sample: u64) -> StreamRng {
    stream(derive_seed(seed, &[case]), sample)
}
