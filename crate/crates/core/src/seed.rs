//! Deterministic seed splitting.
//!
//! Every random stream in a run descends from one root seed. A child seed is
//! the first eight bytes (little endian) of
//! `SHA-256(root_le || label || 0x00 || parts...)`, where `parts` are the
//! little-endian encodings of the words passed in. Monte Carlo trials use
//! [`trial_seed`], which hashes `(root, snr_db, missing_rate, method, trial)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// RNG used everywhere in the crate.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed from a parent seed, a text label and extra words.
pub fn derive(parent: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0u8]);
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

/// Child seed of one Monte Carlo trial.
pub fn trial_seed(root: u64, snr_db: f64, missing_rate: f64, method: &str, trial: u64) -> u64 {
    derive(root, method, &[snr_db.to_bits(), missing_rate.to_bits(), trial])
}

/// Independent sub-streams of one trial, keyed by pipeline stage.
pub fn stage_rng(trial: u64, stage: &str) -> Rng {
    rng_from_seed(derive(trial, stage, &[]))
}
