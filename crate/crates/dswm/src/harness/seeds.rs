//! Stable per-stage seed derivation: every job's seed is a hash of
//! (master seed, stage label, topology, index), so jobs can run in any
//! order or in parallel without consuming each other's randomness.

use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, stage: &str, topology: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(stage.as_bytes());
    hasher.update([0x1f]);
    hasher.update(topology.as_bytes());
    hasher.update([0x1f]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is at least 8 bytes"))
}
