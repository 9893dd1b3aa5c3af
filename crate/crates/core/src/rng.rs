//! Counter-based random streams.
//!
//! Every random draw in the crate is a pure function of a key tuple such as
//! `(seed, sweep, cell, year)`. Keys are folded through SplitMix64, so a site
//! gets the same draw whether it is visited by one thread or many.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Stream tags keep the key spaces of independent stages disjoint.
pub mod tag {
    pub const RESTART: u64 = 1;
    pub const GIBBS: u64 = 2;
    pub const SIM_FIELD_INIT: u64 = 3;
    pub const SIM_TRANSITION: u64 = 4;
    pub const SIM_SWEEP: u64 = 5;
    pub const SIM_COUNTS: u64 = 6;
    pub const SIM_SCATTER: u64 = 7;
    pub const MCEM: u64 = 8;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a seed and a key tuple to a 64-bit word.
#[inline]
pub fn mix(seed: u64, key: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &k in key {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(GOLDEN)));
    }
    h
}

/// Uniform draw in `[0, 1)` addressed by `(seed, key)`.
#[inline]
pub fn uniform(seed: u64, key: &[u64]) -> f64 {
    (mix(seed, key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A full generator for stages that need more than one draw per key.
pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, key))
}

/// Poisson draw; a zero rate always yields zero.
pub fn poisson<R: rand::Rng + ?Sized>(rng: &mut R, rate: f64) -> u32 {
    if rate <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(rate).expect("finite positive Poisson rate");
    let x: f64 = dist.sample(rng);
    x as u32
}

/// Index drawn from an unnormalized weight vector using one uniform.
/// Falls back to the last positive weight on round-off.
pub fn categorical(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = k;
            if target < acc {
                return k;
            }
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_keyed_and_in_range() {
        let a = uniform(42, &[1, 2, 3]);
        assert_eq!(a, uniform(42, &[1, 2, 3]));
        assert_ne!(a, uniform(42, &[1, 2, 4]));
        assert_ne!(a, uniform(43, &[1, 2, 3]));
        for i in 0..10_000 {
            let u = uniform(7, &[i]);
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn uniform_mean_is_half() {
        let n = 100_000;
        let mean: f64 = (0..n).map(|i| uniform(3, &[i])).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn key_order_matters() {
        assert_ne!(mix(1, &[2, 3]), mix(1, &[3, 2]));
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let w = [0.0, 1.0, 0.0, 1.0];
        assert_eq!(categorical(&w, 0.0), 1);
        assert_eq!(categorical(&w, 0.49), 1);
        assert_eq!(categorical(&w, 0.51), 3);
        assert_eq!(categorical(&w, 0.999_999_999), 3);
    }

    #[test]
    fn poisson_zero_rate() {
        let mut r = stream(1, &[1]);
        assert_eq!(poisson(&mut r, 0.0), 0);
    }
}
