//! Shared helpers for the manifest+blob file convention: a UTF-8 JSON
//! manifest describing tensor layout next to a raw little-endian f64 blob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Format("odd-length hex string".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|_| Error::Format(format!("bad hex near `{}`", &s[i..i + 2])))
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn append_tensor(blob: &mut Vec<u8>, index: &mut Vec<TensorEntry>, name: &str, t: &Tensor) {
    index.push(TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        byte_offset: blob.len(),
    });
    for &v in t.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn read_tensor(blob: &[u8], entry: &TensorEntry) -> Result<Tensor> {
    let numel: usize = entry.shape.iter().product();
    let nbytes = numel * 8;
    let end = entry
        .byte_offset
        .checked_add(nbytes)
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| {
            Error::Format(format!(
                "tensor `{}` extends past blob end ({} bytes)",
                entry.name,
                blob.len()
            ))
        })?;
    let mut data = Vec::with_capacity(numel);
    for chunk in blob[entry.byte_offset..end].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Tensor::new(entry.shape.clone(), data)
}

/// Checks declared length and SHA-256 of a blob against its manifest fields.
pub fn check_blob(blob: &[u8], declared_len: usize, declared_sha: &str) -> Result<()> {
    if blob.len() != declared_len {
        return Err(Error::Format(format!(
            "blob length {} does not match declared {declared_len}",
            blob.len()
        )));
    }
    let actual = sha256_hex(blob);
    if !actual.eq_ignore_ascii_case(declared_sha) {
        return Err(Error::Integrity(format!(
            "blob sha256 {actual} does not match declared {declared_sha}"
        )));
    }
    Ok(())
}

/// Manifest path for a user-supplied stem or explicit .json path.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.extension().map(|e| e == "json").unwrap_or(false) {
        path.to_path_buf()
    } else {
        path.with_extension("json")
    }
}

/// Blob path sitting next to a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}
