//! Named, hash-derived RNG substreams.
//!
//! A master seed fans out into independent ChaCha8 streams. The seed of a
//! substream is the first 32 bytes of
//! `SHA-256("fedrec-substream/v1" || master_seed_le || label || 0x00 || idx_le...)`,
//! so any stage (parameter init, one client's negatives, one round's client
//! sampling, one client's noise in one round, one attacker run) can be
//! regenerated in isolation and in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const INIT: &str = "init";
pub const ITEM_FEATURES: &str = "item-features";
pub const NEGATIVES: &str = "negatives";
pub const CLIENT_SAMPLING: &str = "client-sampling";
pub const LOCAL_SHUFFLE: &str = "local-shuffle";
pub const NOISE: &str = "noise";
pub const ATTACK_SPLIT: &str = "attack-split";
pub const ATTACKER: &str = "attacker";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed(&self, label: &str, indices: &[u64]) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"fedrec-substream/v1");
        hasher.update(self.master.to_le_bytes());
        hasher.update(label.as_bytes());
        hasher.update([0u8]);
        for idx in indices {
            hasher.update(idx.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest[..32]);
        out
    }

    pub fn stream(&self, label: &str, indices: &[u64]) -> StreamRng {
        ChaCha8Rng::from_seed(self.seed(label, indices))
    }
}
