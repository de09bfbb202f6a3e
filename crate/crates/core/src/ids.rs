//! Sample-id hashing shared by the dump format and the data split.

use sha2::{Digest, Sha256};

fn leading_u64(digest: &[u8]) -> u64 {
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// First 8 bytes of SHA-256 of the UTF-8 id, read little-endian.
pub fn id_hash(id: &str) -> u64 {
    leading_u64(&Sha256::digest(id.as_bytes()))
}

/// Like [`id_hash`] but keyed by a seed (`seed` as 8 LE bytes, then the id).
pub fn seeded_id_hash(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    leading_u64(&h.finalize())
}
