//! Seeded randomness.
//!
//! All randomness flows from a single run seed through labelled derivation:
//! `Seed::child(label)` hashes the parent seed together with the label using
//! SHA-256 and keeps the first eight bytes. Streams are ChaCha8, which is
//! specified independently of platform and word size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn child(self, label: &str) -> Seed {
        let mut hasher = Sha256::new();
        hasher.update(self.0.to_le_bytes());
        hasher.update(label.as_bytes());
        let out = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&out[..8]);
        Seed(u64::from_le_bytes(bytes))
    }

    pub fn child_idx(self, label: &str, idx: usize) -> Seed {
        self.child(&format!("{label}/{idx}"))
    }

    pub fn rng(self) -> Rng64 {
        Rng64(ChaCha8Rng::seed_from_u64(self.0))
    }
}

/// The one generator used everywhere.
pub struct Rng64(ChaCha8Rng);

impl Rng64 {
    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.0);
    }

    /// `k` distinct indices from `0..n`, in random order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.0, n, k).into_vec()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
