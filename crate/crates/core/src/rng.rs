//! Seeded random number generation.
//!
//! Every stochastic choice in the crate (weight init, data synthesis, batch
//! shuffling, randomization partners) draws from a `SeededRng` so identical
//! seeds reproduce runs bit for bit.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream; changing how one consumer draws does not
    /// perturb the others.
    pub fn fork(&mut self, tag: u64) -> SeededRng {
        let base = self.inner.next_u64();
        SeededRng::new(base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + sd * z
    }

    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Uniform index different from `exclude`; `None` when impossible.
    pub fn index_excluding(&mut self, n: usize, exclude: usize) -> Option<usize> {
        if n <= 1 {
            return None;
        }
        let r = self.inner.gen_range(0..n - 1);
        Some(if r >= exclude { r + 1 } else { r })
    }
}
