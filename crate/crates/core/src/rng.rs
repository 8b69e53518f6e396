//! Seeded random source shared by initializers, data generators and the trainer.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`), whose output stream is
//! fixed by its published specification, so every seeded run reproduces across
//! platforms. Normal deviates come from `rand_distr::StandardNormal`.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Derives an independent stream from `seed` and a label; used so that
    /// adding a new consumer never shifts the draws of existing ones.
    pub fn derived(seed: u64, label: &str) -> Self {
        Rng::new(mix_seed(seed, label.as_bytes()))
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Normal deviate with the given std, redrawn until it lies within two std.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn normal_vec<T: Scalar>(&mut self, len: usize, std: f64) -> Vec<T> {
        (0..len).map(|_| T::lit(self.normal() * std)).collect()
    }

    pub fn trunc_normal_vec<T: Scalar>(&mut self, len: usize, std: f64) -> Vec<T> {
        (0..len).map(|_| T::lit(self.trunc_normal(std))).collect()
    }

    pub fn uniform_vec<T: Scalar>(&mut self, len: usize, lo: f64, hi: f64) -> Vec<T> {
        (0..len).map(|_| T::lit(self.uniform_range(lo, hi))).collect()
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.0);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random::<u64>()
    }
}

/// FNV-1a over the seed's little-endian bytes followed by `bytes`, finished
/// with the SplitMix64 mixer. Stable across platforms and releases.
pub fn mix_seed(seed: u64, bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    splitmix64(h)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
