//! Deterministic random streams.
//!
//! A stream is identified by a [`StreamKey`]: a base seed followed by an
//! ordered list of integer and label components. The key is hashed with
//! SHA-256 and the digest seeds a ChaCha generator, so streams with distinct
//! keys are independent and never depend on scheduling or on how many other
//! streams were opened before them.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Generator type used for every stream in the crate.
pub type Stream = ChaCha12Rng;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    hasher_input: Vec<u8>,
}

impl StreamKey {
    pub fn new(base_seed: u64) -> Self {
        let mut hasher_input = b"adanorm/stream/v1".to_vec();
        hasher_input.extend_from_slice(&base_seed.to_le_bytes());
        Self { hasher_input }
    }

    /// Appends an integer component.
    pub fn with(mut self, value: u64) -> Self {
        self.hasher_input.push(b'u');
        self.hasher_input.extend_from_slice(&value.to_le_bytes());
        self
    }

    /// Appends a label component.
    pub fn label(mut self, name: &str) -> Self {
        self.hasher_input.push(b's');
        self.hasher_input
            .extend_from_slice(&(name.len() as u64).to_le_bytes());
        self.hasher_input.extend_from_slice(name.as_bytes());
        self
    }

    pub fn stream(&self) -> Stream {
        let digest = Sha256::digest(&self.hasher_input);
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha12Rng::from_seed(seed)
    }
}

/// Stream driving trajectory `seed_index` at horizon `horizon`.
pub fn drive_key(base_seed: u64, horizon: u64, seed_index: u64) -> StreamKey {
    StreamKey::new(base_seed)
        .with(horizon)
        .with(seed_index)
        .label("drive")
}

/// Stream used to resample gradients at step `t` of a trajectory, isolated
/// from the driving stream.
pub fn bias_key(base_seed: u64, horizon: u64, seed_index: u64, t: u64) -> StreamKey {
    drive_key(base_seed, horizon, seed_index)
        .label("bias")
        .with(t)
}
