//! Deterministic RNG streams derived from a run seed and a purpose label.
//!
//! Hashing the label into the stream key gives every consumer (init,
//! shuffling, attack starts, synthesis) an independent stream, so adding a
//! draw in one place never shifts the values seen elsewhere.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// ChaCha8 stream keyed by `(seed, label)` via SHA-256.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_label_separated() {
        let mut a1 = derive_rng(7, "init");
        let mut a2 = derive_rng(7, "init");
        let mut b = derive_rng(7, "shuffle");
        let mut c = derive_rng(8, "init");
        let x = a1.next_u64();
        assert_eq!(x, a2.next_u64());
        assert_ne!(x, b.next_u64());
        assert_ne!(x, c.next_u64());
    }
}
