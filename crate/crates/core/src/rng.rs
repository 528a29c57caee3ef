//! Deterministic random streams.
//!
//! Every randomized operation draws from a [`StreamRng`] built from an
//! [`RngStream`] `(seed, stream)` pair. The generator is ChaCha20 (counter
//! based): the 256-bit key is the SplitMix64 expansion of `seed` and the
//! ChaCha stream id is `stream`. Identical pairs give identical sequences on
//! every platform; distinct stream ids give independent sequences.
//!
//! Normal variates use the Marsaglia polar method. Uniform doubles take the
//! top 53 bits of a `u64` draw.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Identifies one logical random sub-stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

/// Tags used to derive sub-streams for the pipeline's consumers.
pub mod tags {
    pub const STREAM_GEN: u64 = 1;
    pub const EM: u64 = 2;
    pub const DFR: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const KMEANS: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const INIT: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub const fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Derives a child stream. The child id is
    /// `splitmix64(stream ^ splitmix64(tag))`, so siblings never share a stream.
    pub fn substream(&self, tag: u64) -> Self {
        Self { seed: self.seed, stream: splitmix64(self.stream ^ splitmix64(tag)) }
    }

    /// Chains several tags, e.g. `(domain, level)` pairs.
    pub fn path(&self, tags: &[u64]) -> Self {
        tags.iter().fold(*self, |s, &t| s.substream(t))
    }

    pub fn generator(&self) -> StreamRng {
        let mut key = [0u8; 32];
        let mut state = self.seed;
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(self.stream);
        StreamRng { inner, spare: None }
    }
}

/// A live generator for one [`RngStream`].
#[derive(Clone, Debug)]
pub struct StreamRng {
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

impl StreamRng {
    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` by rejection sampling. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// One standard normal draw (Marsaglia polar method).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `n` i.i.d. draws from N(0, 1).
pub fn standard_normal(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}
