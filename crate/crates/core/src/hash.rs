//! Content hashing for artifacts, configs and parameter freezes.

use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

/// Hash a set of named f64 tensors (name order fixed by the caller).
/// Used for frozen-weight contracts: bit-identical values hash identically.
pub fn hash_named_tensors<'a>(tensors: impl Iterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut hasher = Sha256::new();
    for (name, values) in tensors {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

fn hex(digest: &[u8]) -> String {
    let mut out = String::with_capacity(digest.len() * 2);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
