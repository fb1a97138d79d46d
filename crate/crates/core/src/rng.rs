//! Named seed derivation.
//!
//! Every random stream in the crate comes from a root seed plus a stage
//! label, so introducing a new consumer never shifts the draws seen by an
//! existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a child seed from `root` and a stage label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    derive_seed(root, &format!("{label}#{index}"))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stage_rng(root: u64, label: &str) -> Rng {
    rng_from(derive_seed(root, label))
}
