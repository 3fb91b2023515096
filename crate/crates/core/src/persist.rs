//! Checksummed artifact files.
//!
//! Layout: one header line `SYCO-CKPT v1 sha256=<hex>` followed by the JSON
//! payload. The digest covers the payload bytes only.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &str = "SYCO-CKPT v1";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{0}: file not found")]
    Missing(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: corrupt artifact: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("serialization failed: {0}")]
    Encode(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PersistError>;

fn digest(payload: &[u8]) -> String {
    hex::encode(Sha256::digest(payload))
}

pub fn encode<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(value)?;
    let mut out = format!("{MAGIC} sha256={}\n", digest(&payload)).into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Reason the bytes are not a valid envelope, or the decoded value.
pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> std::result::Result<T, String> {
    let nl = bytes.iter().position(|b| *b == b'\n').ok_or("missing header line")?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| "header is not UTF-8")?;
    let hex = header
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.strip_prefix(" sha256="))
        .ok_or_else(|| format!("unrecognized header {header:?}"))?;
    let payload = &bytes[nl + 1..];
    let actual = digest(payload);
    if actual != hex {
        return Err(format!("checksum mismatch (header {hex}, payload {actual})"));
    }
    serde_json::from_slice(payload).map_err(|e| format!("payload does not decode: {e}"))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| match source.kind() {
        io::ErrorKind::NotFound => PersistError::Missing(path.to_path_buf()),
        _ => PersistError::Io {
            path: path.to_path_buf(),
            source,
        },
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| PersistError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &encode(value)?)
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    decode(&read(path)?).map_err(|reason| PersistError::Corrupt {
        path: path.to_path_buf(),
        reason,
    })
}

/// Pretty JSON without an envelope, for human-facing outputs.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| PersistError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
