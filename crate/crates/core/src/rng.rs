//! Named random streams derived from a single root seed.
//!
//! Every stage draws from its own stream, keyed by a name and a short list of
//! integers (client id, round, epoch, ...). Streams never depend on the order
//! in which other streams were consumed, so stages can be re-run in isolation
//! and client updates can execute in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Builds the generator for stream `name` keyed by `keys` under `root`.
pub fn stream(root: u64, name: &str, keys: &[u64]) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(b"mosaic-stream-v1");
    hasher.update(root.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    for k in keys {
        hasher.update(k.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// Derives a child seed (for APIs that take a plain `u64` seed).
pub fn derive_seed(root: u64, name: &str, keys: &[u64]) -> u64 {
    use rand::RngCore;
    stream(root, name, keys).next_u64()
}
