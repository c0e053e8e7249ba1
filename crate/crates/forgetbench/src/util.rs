use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of arbitrary bytes. Used for cache keys, prompt
/// digests and parameter snapshots.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
