//! Seeded random streams with a reproducibility contract: the same seed and
//! call sequence always produce the same draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RNG_ALGORITHM: &str = "chacha8";

/// A named, seeded stream. Derive independent substreams per task so that
/// concurrent work cannot perturb reproducibility.
#[derive(Debug, Clone)]
pub struct RngStream {
    pub seed: u64,
    pub algorithm: &'static str,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            algorithm: RNG_ALGORITHM,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream keyed by a label, decoupled from draws made on
    /// `self`.
    pub fn derive(&self, label: &str) -> RngStream {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
        for b in label.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        RngStream::new(self.seed ^ h)
    }

    /// Substream keyed by an index (sample number, epoch, mask id, ...).
    pub fn derive_indexed(&self, label: &str, index: u64) -> RngStream {
        self.derive(&format!("{label}:{index}"))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(rand_distr::StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random_bool(p.clamp(0.0, 1.0))
    }

    /// Deterministic Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }
}
