//! Seeded, platform-stable randomness.
//!
//! All experiment randomness flows from one root seed through named
//! substreams (permutation, init, shuffling, reservoir, ...), so changing
//! how one component draws does not perturb the others.

use crate::error::{Error, Result};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic random stream: identical seed, identical draw sequence,
/// on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent stream from the root seed and a label.
    /// The derivation depends only on the constructor seed, never on
    /// how many values have been drawn.
    pub fn substream(&self, label: &str) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ fnv1a64(label.as_bytes())))
    }

    /// Substream keyed by a label and an index (e.g. one per task or seed).
    pub fn substream_indexed(&self, label: &str, index: u64) -> SeededRng {
        let mixed = splitmix64(self.seed ^ fnv1a64(label.as_bytes()));
        SeededRng::new(splitmix64(
            mixed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        ))
    }

    /// Uniform random permutation of `0..n` by Fisher-Yates.
    pub fn permutation(&mut self, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::EmptyPermutation);
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.gen_range(0..=i);
            perm.swap(i, j);
        }
        Ok(perm)
    }

    pub fn gen_range_usize(&mut self, upper: usize) -> usize {
        self.inner.gen_range(0..upper)
    }

    pub fn gen_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw from `[-bound, bound)`.
    pub fn gen_symmetric(&mut self, bound: f64) -> f64 {
        self.inner.gen_range(-bound..bound)
    }

    /// Samples `k` distinct indices from `0..n` (all of them if `k >= n`).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        if k >= n {
            return (0..n).collect();
        }
        // Partial Fisher-Yates: the first k slots of a lazily-swapped array.
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = self.inner.gen_range(i..n);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
