//! Seeded, portable random number generation.
//!
//! The generator is ChaCha8 (`rand_chacha`). A `(seed, stream)` pair selects
//! the generator state: the 64-bit seed is expanded to a 256-bit ChaCha key by
//! `SeedableRng::seed_from_u64`, and the stream id is the ChaCha stream
//! counter. Uniform reals are 53-bit mantissa draws in `[0, 1)`. The draw
//! sequence for a given `(seed, stream)` is identical on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent generator for a named stream of the same root seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        // std is validated by callers; a zero std degenerates to the mean.
        if std == 0.0 {
            return mean;
        }
        Normal::new(mean, std)
            .expect("finite, positive standard deviation")
            .sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle driven by this generator.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
