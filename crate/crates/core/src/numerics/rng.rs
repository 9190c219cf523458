//! Seeded, platform-independent random streams.
//!
//! Every consumer of randomness gets its own [`RngStream`] addressed by a
//! `(label, client, round)` triple under a global seed. The stream key is
//! derived with SplitMix64 over the seed, an FNV-1a hash of the label and
//! the two indices; the 256-bit key seeds a ChaCha8 generator. Both
//! algorithms are fixed, so draws are identical across runs and platforms.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::Matrix;

/// Address of a random stream under a global seed.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub label: String,
    pub client: u64,
    pub round: u64,
}

impl StreamId {
    pub fn new(label: impl Into<String>, client: u64, round: u64) -> Self {
        Self {
            label: label.into(),
            client,
            round,
        }
    }

    pub fn global(label: impl Into<String>) -> Self {
        Self::new(label, u64::MAX, u64::MAX)
    }
}

pub struct RngStream {
    seed: u64,
    id: StreamId,
    inner: ChaCha8Rng,
}

impl std::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RngStream")
            .field("seed", &self.seed)
            .field("id", &self.id)
            .finish_non_exhaustive()
    }
}

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut state = seed;
        let mut key = [0u8; 32];
        let words = [
            splitmix64(&mut state),
            splitmix64(&mut state) ^ fnv1a64(id.label.as_bytes()),
            splitmix64(&mut state) ^ id.client,
            splitmix64(&mut state) ^ id.round,
        ];
        // Second mixing pass decorrelates nearby indices.
        for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
            let mut s = w;
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        Self {
            seed,
            id,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn for_stream(seed: u64, label: &str, client: u64, round: u64) -> Self {
        Self::new(seed, StreamId::new(label, client, round))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> &StreamId {
        &self.id
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Gamma(shape, 1) draw. `shape` must be positive and finite.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        Gamma::new(shape, 1.0)
            .expect("gamma shape must be positive and finite")
            .sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| std * self.normal()).collect();
        Matrix::from_vec(rows, cols, data).expect("length matches by construction")
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, half_width: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| self.uniform_range(-half_width, half_width))
            .collect();
        Matrix::from_vec(rows, cols, data).expect("length matches by construction")
    }
}

impl RngCore for RngStream {
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
