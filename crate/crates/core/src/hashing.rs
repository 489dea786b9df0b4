//! Content hashing for artifacts and manifests.
//!
//! All hashes are SHA-256 rendered as lowercase hex. Multi-part hashes use
//! length-prefixed framing so part boundaries are unambiguous.

use sha2::{Digest, Sha256};

/// Incremental multi-part hasher with length-prefixed framing.
pub struct PartHasher {
    inner: Sha256,
}

impl PartHasher {
    pub fn new(label: &str) -> Self {
        let mut inner = Sha256::new();
        inner.update((label.len() as u64).to_le_bytes());
        inner.update(label.as_bytes());
        PartHasher { inner }
    }

    pub fn part(&mut self, bytes: &[u8]) -> &mut Self {
        self.inner.update((bytes.len() as u64).to_le_bytes());
        self.inner.update(bytes);
        self
    }

    pub fn text(&mut self, s: &str) -> &mut Self {
        self.part(s.as_bytes())
    }

    pub fn finish(self) -> String {
        hex::encode(self.inner.finalize())
    }
}

/// Hash of a single byte string.
pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file's contents.
pub fn hash_file(path: &std::path::Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hash_bytes(&bytes))
}

/// Little-endian byte serialization of an f64 slice.
pub fn f64s_to_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
