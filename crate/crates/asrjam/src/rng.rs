//! Deterministic seed handling: one root seed, split per component so
//! experiments draw independent but reproducible streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive a child RNG from a root seed and a component label. The same
/// (seed, label) pair always yields the same stream, and distinct labels
/// yield independent streams.
pub fn component_rng(root_seed: u64, label: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

/// Derive a child u64 seed (for APIs that take plain integer seeds).
pub fn component_seed(root_seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
