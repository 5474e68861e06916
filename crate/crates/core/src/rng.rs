//! Named random streams.
//!
//! Every source of randomness in the pipeline is a ChaCha stream derived from
//! the single root seed and a path-like stream name, so stages can run in any
//! order (or in parallel over scenes) and still reproduce bit-identically.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG for `(root_seed, name)`.
///
/// The mapping is `ChaCha8(sha256(root_seed_le || name))`, which is stable
/// across platforms and releases.
pub fn stream(root_seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Collapse `(root_seed, name)` to a single u64, for APIs that take a scalar seed.
pub fn derive_seed(root_seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
