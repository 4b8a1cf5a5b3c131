//! Seeded randomness helpers.
//!
//! Every random draw in the crate flows through a [`ChaCha8Rng`] constructed
//! from an explicit `u64` seed, so identical seeds give bit-identical runs on
//! any platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The one RNG used everywhere.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable per-item seed derived from a run seed and an item index, so work
/// parallelized over items draws the same randomness regardless of schedule.
/// SplitMix64 finalizer over the combined words.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One standard-normal draw via the Marsaglia polar method.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

/// Uniform draw from the symmetric interval ±`1/√fan_in`, the layer weight
/// initialization used by all encoders.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, fan_in: usize) -> f64 {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.gen_range(-bound..bound)
}
