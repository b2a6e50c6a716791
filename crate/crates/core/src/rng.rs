//! Seed plumbing. Every random decision in the crate flows from a `ChaCha8Rng`
//! constructed here so that runs are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Hex digest (first 16 bytes of SHA-256) used as a content hash.
pub fn content_hash(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    hex::encode(&out[..16])
}
