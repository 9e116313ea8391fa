//! Deterministic, splittable random number generation.
//!
//! Every stochastic operation in the crate draws from [`Rng`], a thin
//! wrapper over a counter-based stream cipher generator. The same seed and
//! the same call sequence produce a bit-identical stream, and independent
//! substreams can be derived from (seed, stream id) pairs without any
//! coordination, so per-task workers never share generator state.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seeded generator with cheap substream derivation.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Base seed this generator (and its substreams) derive from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator identified by (base seed, stream id).
    ///
    /// Does not consume state from `self`, so substream layouts are stable
    /// no matter how much the parent has been used.
    pub fn substream(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Vector of i.i.d. standard normal draws.
    pub fn normal_vec(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.normal()).collect()
    }

    /// Uniform integer in [0, n). Panics if n == 0.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Bernoulli(p).
    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fresh 64-bit value, e.g. for deriving child seeds.
    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            slice.swap(i, j);
        }
    }
}
