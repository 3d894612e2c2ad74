//! Counter-style random stream derivation.
//!
//! Every random quantity is drawn from a ChaCha stream whose key is a hash of
//! `(base_seed, split tag, index)` and whose stream id names the quantity.
//! Results therefore do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// What a stream is used for. Distinct purposes never share key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Pilots = 1,
    Users = 2,
    Noise = 3,
    Prior = 4,
    Shuffle = 5,
    Matrix = 6,
}

pub fn stream(base_seed: u64, split: &str, index: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"lamp-rng/1");
    hasher.update(base_seed.to_le_bytes());
    hasher.update((split.len() as u64).to_le_bytes());
    hasher.update(split.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(purpose as u64);
    rng
}
