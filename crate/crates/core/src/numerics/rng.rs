use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// A named, seeded random stream.
///
/// The stream is a pure function of `(master_seed, stream_label)`: the ChaCha8
/// key is the SHA-256 of the seed's little-endian bytes followed by the label.
/// Child streams are derived with [`RngState::fork`], so adding a new consumer
/// never shifts the values drawn by existing ones.
#[derive(Clone, Debug)]
pub struct RngState {
    master_seed: u64,
    stream_label: String,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(master_seed: u64, stream_label: impl Into<String>) -> Self {
        let stream_label = stream_label.into();
        let mut hasher = Sha256::new();
        hasher.update(master_seed.to_le_bytes());
        hasher.update(stream_label.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            master_seed,
            stream_label,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Independent stream labelled `"{self.label}/{sub}"`.
    pub fn fork(&self, sub: &str) -> Self {
        Self::new(self.master_seed, format!("{}/{}", self.stream_label, sub))
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn label(&self) -> &str {
        &self.stream_label
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        Uniform::new(lo, hi)
            .expect("uniform bounds must satisfy lo < hi")
            .sample(&mut self.rng)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}
