//! Seeded random streams.
//!
//! Every stochastic routine takes a `u64` seed and builds its own ChaCha
//! stream, so results never depend on execution order. Batches derive one
//! child seed per member with [`split_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child seed `index` of `seed` (splitmix64 finalizer over both words).
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Standard-normal draw of length `len` from a fresh stream for `seed`.
pub fn gaussian_noise(len: usize, seed: u64) -> Vec<f64> {
    standard_normal_vec(&mut seeded(seed), len)
}

/// Initial noise for member `index` of a batch seeded with `seed`.
pub fn batch_noise(dim: usize, seed: u64, index: usize) -> Vec<f64> {
    gaussian_noise(dim, split_seed(seed, index as u64))
}
