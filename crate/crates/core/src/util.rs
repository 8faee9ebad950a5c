//! Named random streams and hashing helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent generator for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent() {
        let a: u64 = stream_rng(1, "data", 0).random();
        assert_eq!(a, stream_rng(1, "data", 0).random::<u64>());
        assert_ne!(a, stream_rng(1, "scheduler", 0).random::<u64>());
        assert_ne!(a, stream_rng(1, "data", 1).random::<u64>());
        assert_ne!(a, stream_rng(2, "data", 0).random::<u64>());
    }
}
