//! Seed derivation tree.
//!
//! Every random stream in the pipeline is seeded from the root seed through
//! [`derive`], keyed by a stream tag and the indices that identify the unit of
//! work (patient, step, candidate, ...). Nothing reads global RNG state, so a
//! result depends only on its own key and never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream tags. Changing any of these changes every downstream result.
pub mod stream {
    pub const COHORT: u64 = 0x01;
    pub const SPLIT: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const TRAIN: u64 = 0x04;
    pub const IMPUTE: u64 = 0x05;
    pub const SCORER: u64 = 0x06;
    pub const SAMPLE: u64 = 0x07;
    pub const CLASSIFIER: u64 = 0x08;
    pub const MAP: u64 = 0x09;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive a child seed from `seed` and an ordered list of keys.
pub fn derive(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |h, &k| splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019))))
}

/// Stable 64-bit key for a string identifier (first 8 bytes of its SHA-256).
pub fn key_of(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(buf)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, keys: &[u64]) -> Rng {
    rng(derive(seed, keys))
}
