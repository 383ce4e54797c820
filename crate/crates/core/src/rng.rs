//! Seeded random streams.
//!
//! Backed by ChaCha8 (`rand_chacha`), whose output is specified independently
//! of platform and word size, with normals drawn through `rand_distr`'s
//! ziggurat sampler. A given seed therefore replays the same stream everywhere.

use rand::seq::index;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
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

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; deterministic in (parent seed, stream id).
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `amount` distinct indices from `0..n`.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        index::sample(&mut self.inner, n, amount).into_vec()
    }

    pub fn shuffle(&mut self, items: &mut [usize]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// I.i.d. standard normal tensor of the given shape.
pub fn gaussian_sample(rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}
