//! Seeded, per-purpose random streams.
//!
//! Every stream is a xoshiro256++ generator whose 64-bit seed is derived by
//! hashing `(seed, stream label, counter)` with the SplitMix64 finalizer.
//! The generator is then expanded from that key with SplitMix64, as
//! `Xoshiro256PlusPlus::seed_from_u64` does. Two sources built from the same
//! triple emit identical sequences on every platform.

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::linalg::DenseVector;

/// What a stream is used for. Distinct purposes never share state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    BatchSampling,
    Rademacher,
    CoinFlip,
    Permutation,
    /// Synthetic data generation (not used by the optimizers).
    Synthetic,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::BatchSampling => 0x6261_7463_6800_0001,
            Stream::Rademacher => 0x7261_6465_6d00_0002,
            Stream::CoinFlip => 0x636f_696e_0000_0003,
            Stream::Permutation => 0x7065_726d_0000_0004,
            Stream::Synthetic => 0x7379_6e74_6800_0005,
        }
    }
}

/// SplitMix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds several words into one seed.
pub fn hash_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, &p| mix64(acc ^ p))
}

#[derive(Clone, Debug)]
pub struct RandomSource {
    stream: Stream,
    rng: Xoshiro256PlusPlus,
}

impl RandomSource {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_counter(seed, stream, 0)
    }

    pub fn with_counter(seed: u64, stream: Stream, counter: u64) -> Self {
        let key = hash_seed(&[seed, stream.tag(), counter]);
        RandomSource {
            stream,
            rng: Xoshiro256PlusPlus::seed_from_u64(key),
        }
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    /// Vector of independent ±1 entries.
    pub fn rademacher(&mut self, d: usize) -> Result<DenseVector> {
        if d == 0 {
            return Err(Error::EmptyDimension);
        }
        let mut out = Vec::with_capacity(d);
        let mut bits = 0u64;
        for i in 0..d {
            if i % 64 == 0 {
                bits = self.rng.next_u64();
            }
            out.push(if bits & 1 == 1 { 1.0 } else { -1.0 });
            bits >>= 1;
        }
        Ok(DenseVector::from_vec(out))
    }

    /// `b` distinct indices drawn uniformly without replacement from `0..n`.
    pub fn sample_batch(&mut self, n: usize, b: usize) -> Result<Vec<usize>> {
        if b == 0 || b > n {
            return Err(Error::InvalidBatch { batch: b, n });
        }
        if b == n {
            return Ok((0..n).collect());
        }
        Ok(index::sample(&mut self.rng, n, b).into_vec())
    }

    /// `true` with probability `p`.
    pub fn coin(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        // uniform on [0, 1): p = 1 is always true, p = 0 always false
        Ok(self.rng.random::<f64>() < p)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        self.shuffle(&mut perm);
        perm
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}
