//! Checkpoint files:
//!
//! ```text
//! magic    "ICKP"
//! version  u32 little-endian (= 1)
//! config   [u8; 32]  run specification digest
//! body     u32 little-endian length, then JSON
//! checksum [u8; 32]  SHA-256 of everything before it
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::TraceError;
use crate::model::{content_key, CacheKey};

const MAGIC: &[u8; 4] = b"ICKP";
const VERSION: u32 = 1;

pub fn checkpoint_path(dir: &Path, generation: u32) -> PathBuf {
    dir.join(format!("gen-{generation:03}.ckpt"))
}

pub fn cache_snapshot_path(dir: &Path, generation: u32) -> PathBuf {
    dir.join(format!("gen-{generation:03}.cache"))
}

/// Highest-numbered checkpoint in `dir`.
pub fn latest(dir: &Path) -> Option<(u32, PathBuf)> {
    let entries = fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            let g = name.strip_prefix("gen-")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((g, dir.join(name)))
        })
        .max_by_key(|(g, _)| *g)
}

pub fn encode<T: Serialize>(config: &CacheKey, body: &T) -> Vec<u8> {
    let json = serde_json::to_vec(body).expect("checkpoint body serializes");
    let mut out = Vec::with_capacity(json.len() + 76);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let sum = content_key(&out);
    out.extend_from_slice(sum.as_bytes());
    out
}

/// Decodes a checkpoint, refusing one written under another configuration.
pub fn decode<T: DeserializeOwned>(bytes: &[u8], expected: &CacheKey) -> Result<T, TraceError> {
    let corrupt = |m: &str| TraceError::CorruptCheckpoint(m.to_string());
    if bytes.len() < 4 + 4 + 32 + 4 + 32 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad header"));
    }
    let (content, sum) = bytes.split_at(bytes.len() - 32);
    if content_key(content).as_bytes() != sum {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(content[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let config = CacheKey::from_bytes(content[8..40].try_into().unwrap());
    if &config != expected {
        return Err(TraceError::ConfigMismatch { checkpoint: config.to_hex(), current: expected.to_hex() });
    }
    let len = u32::from_le_bytes(content[40..44].try_into().unwrap()) as usize;
    if content.len() != 44 + len {
        return Err(corrupt("length mismatch"));
    }
    serde_json::from_slice(&content[44..]).map_err(|e| corrupt(&e.to_string()))
}

pub fn write<T: Serialize>(path: &Path, config: &CacheKey, body: &T) -> Result<(), TraceError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(config, body)).map_err(|e| TraceError::Io(e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| TraceError::Io(e.to_string()))
}

pub fn read<T: DeserializeOwned>(path: &Path, expected: &CacheKey) -> Result<T, TraceError> {
    let bytes = fs::read(path).map_err(|e| TraceError::Io(e.to_string()))?;
    decode(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_guards() {
        let key = content_key(b"config");
        let bytes = encode(&key, &vec![1, 2, 3]);
        assert_eq!(decode::<Vec<i32>>(&bytes, &key).unwrap(), [1, 2, 3]);
        let other = content_key(b"edited");
        assert!(matches!(decode::<Vec<i32>>(&bytes, &other), Err(TraceError::ConfigMismatch { .. })));
        let mut flipped = bytes.clone();
        flipped[45] ^= 1;
        assert!(matches!(decode::<Vec<i32>>(&flipped, &key), Err(TraceError::CorruptCheckpoint(_))));
        assert!(matches!(decode::<Vec<i32>>(&bytes[..20], &key), Err(TraceError::CorruptCheckpoint(_))));
    }

    #[test]
    fn latest_picks_highest_generation() {
        let dir = tempfile::tempdir().unwrap();
        let key = content_key(b"c");
        for g in [1, 3, 2] {
            write(&checkpoint_path(dir.path(), g), &key, &g).unwrap();
        }
        assert_eq!(latest(dir.path()).unwrap().0, 3);
    }
}
