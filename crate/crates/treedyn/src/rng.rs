//! Deterministic seed derivation.
//!
//! Every stochastic component takes an explicit `u64` seed. Sub-streams
//! (per sample, per query, per CMA generation) are derived by hashing
//! `(master, label, index)` so that parallel work items get independent,
//! reproducible generators regardless of scheduling.

use rand_chacha::ChaCha20Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a master seed, a stream label, and an index.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Deterministic generator for a derived stream.
pub fn stream_rng(master: u64, label: &str, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(master, label, index))
}

/// Deterministic generator seeded directly.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
