//! Seeded random number generation.
//!
//! Everything that draws randomness goes through [`Prng`] so corpus
//! builds, training runs and samplers are pure functions of their seeds.
//! Uniform and Gaussian draws are derived from the raw ChaCha stream by
//! hand so the bit pattern does not depend on distribution crates.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct Prng {
    inner: ChaCha8Rng,
    /// Spare Gaussian draw from the last Box-Muller pair.
    spare: Option<f64>,
}

impl Prng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Prng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Derives an independent stream for a named sub-task.
    ///
    /// Based on splitmix-style mixing of the parent seed with a label hash,
    /// so per-utterance work can run in parallel yet stay deterministic.
    pub fn derive(seed: u64, label: &str, index: u64) -> Self {
        let mut h: u64 = 0x9e37_79b9_7f4a_7c15 ^ seed;
        for b in label.bytes() {
            h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(b as u64);
        }
        h ^= index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 29;
        Prng::seed_from_u64(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.inner.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        loop {
            let u1 = self.uniform();
            if u1 <= f64::MIN_POSITIVE {
                continue;
            }
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            self.spare = Some(r * theta.sin());
            return r * theta.cos();
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Prng::seed_from_u64(7);
        let mut b = Prng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let a: Vec<u64> = (0..8).map(|_| Prng::derive(1, "x", 0).next_u64()).collect();
        let b: Vec<u64> = (0..8).map(|_| Prng::derive(1, "x", 1).next_u64()).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut rng = Prng::seed_from_u64(11);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
