use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest of the compact JSON encoding of `value`. Field order follows the
/// type's declaration order, and maps must be ordered, so the digest is stable.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(bytes)
}

pub fn file_digest(path: &std::path::Path) -> std::io::Result<String> {
    Ok(sha256_hex(std::fs::read(path)?))
}
