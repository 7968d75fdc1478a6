//! Named, reproducible random streams derived from a root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Generator keyed by `(seed, stream, key)`; distinct streams never share state.
pub fn derive_rng(seed: u64, stream: &str, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(seed, stream, key))
}

pub fn derive_seed(seed: u64, stream: &str, key: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((stream.len() as u64).to_le_bytes());
    h.update(stream.as_bytes());
    h.update(key.as_bytes());
    h.finalize().into()
}

/// Stream for training step `step`, so resumed runs draw identical batches.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    derive_rng(seed, "train-step", &step.to_string())
}
