//! Seeded random streams.
//!
//! Every stochastic component draws from a [`ChaCha8Rng`] derived from an
//! explicit `(seed, stream)` pair so results are reproducible across runs and
//! platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream label (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derived(seed: u64, stream: u64) -> Rng {
    seeded(derive_seed(seed, stream))
}

/// Standard-normal vector of length `n`.
pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    use rand::Rng as _;
    (0..n)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect()
}
