//! Deterministic text output helpers shared by report writers.
//!
//! All floating-point values written to CSV/JSON artifacts go through
//! [`fmt_f64`] so that identical runs produce byte-identical files.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Format a float with 17 significant digits (round-trip exact for f64).
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Hex-encoded SHA-256 over the canonical JSON encoding of `value`,
/// truncated to 16 characters. Used as a content key for stage caching.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("serializable value");
    let digest = Sha256::digest(json.as_bytes());
    let mut hex = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Hex-encoded SHA-256 over raw bytes, truncated to 16 characters. Used to
/// fingerprint artifact files.
pub fn bytes_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Split-mix style seed derivation so each named pipeline stage draws from
/// an independent stream of the master seed.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let digest = Sha256::digest(stream.as_bytes());
    let mut tag = [0u8; 8];
    tag.copy_from_slice(&digest[..8]);
    let mut z = master
        .wrapping_add(u64::from_le_bytes(tag))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
