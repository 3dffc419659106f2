//! Counter-based seed derivation.
//!
//! Every random stream in the crate comes from `derive_rng(seed, purpose, index)`:
//! the SHA-256 digest of `seed` (little-endian u64), the UTF-8 purpose label, a zero
//! byte, and `index` (little-endian u64) is the 32-byte key of a ChaCha8 generator.
//! Streams never share state, so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_rng(seed: u64, purpose: &str, index: u64) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Stream keyed by a string (dataset or sub-dataset id) instead of an integer.
pub fn derive_rng_keyed(seed: u64, purpose: &str, key: &str) -> Rng {
    derive_rng(seed, &format!("{purpose}/{key}"), 0)
}
