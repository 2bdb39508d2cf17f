use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// SHA-256 of the compact JSON serialization. Struct fields serialize in
/// declaration order and maps are ordered, so equal values hash equally.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<[u8; 32]> {
    let json = serde_json::to_vec(value)?;
    Ok(sha256(&json))
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn to_hex(hash: &[u8; 32]) -> String {
    hex::encode(hash)
}
