//! Seeded random streams. Every phase draws from its own stream derived
//! from one root seed, so adding draws in one phase never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// `hash(root, name)` folded to 64 bits.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

pub fn stream(root: u64, name: &str) -> Stream {
    Stream::seed_from_u64(derive_seed(root, name))
}

pub fn from_seed(seed: u64) -> Stream {
    Stream::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_separate_streams() {
        assert_eq!(derive_seed(7, "train"), derive_seed(7, "train"));
        assert_ne!(derive_seed(7, "train"), derive_seed(7, "test"));
        assert_ne!(derive_seed(7, "train"), derive_seed(8, "train"));
    }
}
