//! Seed derivation.
//!
//! Every random choice in the crate draws from ChaCha8 (`rand_chacha` 0.9,
//! whose output stream is fixed by the ChaCha specification and stable
//! across platforms). Sub-seeds are derived with SHA-256 so that a choice
//! depends only on the global seed and a stable key, never on processing
//! order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

/// Derives a 64-bit sub-seed from a parent seed and a textual key.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(key.as_bytes())
        .finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// A ChaCha8 generator keyed by `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw from `0..bound` by rejection sampling on 64-bit words.
///
/// Implemented here rather than through `rand::Rng::gen_range` so that the
/// mapping from generator output to index cannot change under a dependency
/// upgrade.
pub fn uniform_below(rng: &mut impl RngCore, bound: u64) -> u64 {
    assert!(bound > 0, "empty range");
    // Largest multiple of `bound` that fits; values at or above it are rejected.
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % bound;
        }
    }
}
