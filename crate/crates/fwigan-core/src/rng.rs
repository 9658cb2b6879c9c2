//! Deterministic random streams.
//!
//! Every stochastic choice in a run (shot shuffling, noise draws, mixing
//! coefficients, parameter init) pulls from a ChaCha8 stream whose seed is
//! derived from the run seed plus a purpose tag and integer coordinates
//! (epoch, batch, iteration). Derivation by hashing keeps streams
//! independent of loop structure, so histories are reproducible bit-for-bit
//! regardless of thread count, and a shortened run produces a prefix of the
//! full run's history.
//!
//! Uniform/normal generation is written out here rather than pulled from a
//! distributions crate so the exact bit streams are pinned by this code.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::scalar::Scalar;

/// FNV-1a over the tag and coordinates, mixed into the base seed.
pub fn derive_seed(base: u64, tag: &str, coords: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET ^ base.wrapping_mul(PRIME);
    for byte in tag.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(PRIME);
    }
    for c in coords {
        for byte in c.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

/// Seeded generator for one purpose-specific stream.
pub struct Stream {
    rng: ChaCha8Rng,
    /// Spare normal from the last Box-Muller pair.
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn derived(base: u64, tag: &str, coords: &[u64]) -> Self {
        Self::new(derive_seed(base, tag, coords))
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; draws are consumed in pairs.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // Avoid ln(0) by nudging u1 away from zero.
        let u1 = (self.uniform()).max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T]) {
        for x in out {
            *x = T::fl(self.normal());
        }
    }

    pub fn normal_vec<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        let mut v = vec![T::zero(); n];
        self.fill_normal(&mut v);
        v
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.rng.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Uniform in (lo, hi) scaled from [0,1).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_separates_streams() {
        let a = derive_seed(7, "noise", &[1, 2]);
        let b = derive_seed(7, "noise", &[1, 3]);
        let c = derive_seed(7, "mu", &[1, 2]);
        let d = derive_seed(8, "noise", &[1, 2]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn streams_reproducible() {
        let mut s1 = Stream::derived(42, "x", &[0]);
        let mut s2 = Stream::derived(42, "x", &[0]);
        for _ in 0..100 {
            assert_eq!(s1.uniform().to_bits(), s2.uniform().to_bits());
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut s = Stream::new(5);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = s.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut s = Stream::new(9);
        let mut xs: Vec<usize> = (0..50).collect();
        s.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(xs, (0..50).collect::<Vec<_>>());
    }
}
