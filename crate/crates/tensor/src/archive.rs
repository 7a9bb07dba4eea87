//! Single-file archive of named tensors: a JSON manifest followed by raw
//! little-endian `f64` blobs, guarded by a SHA-256 of the payload.
//!
//! Layout: `b"ICSTARC1"`, manifest length as `u64` LE, manifest JSON, payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ICSTARC1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<EntryHeader>,
    payload_bytes: u64,
    payload_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Write the archive to a temporary sibling and rename it into place.
pub fn write_archive(path: &Path, meta: &serde_json::Value, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut payload = Vec::new();
    let mut headers = Vec::with_capacity(entries.len());
    for (name, t) in entries {
        headers.push(EntryHeader {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        meta: meta.clone(),
        tensors: headers,
        payload_bytes: payload.len() as u64,
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| archive_err(path, e.to_string()))?;
    let io = |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("partial");
    let mut file = fs::File::create(&tmp).map_err(io)?;
    file.write_all(MAGIC).map_err(io)?;
    file.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    file.write_all(&json).map_err(io)?;
    file.write_all(&payload).map_err(io)?;
    file.sync_all().map_err(io)?;
    drop(file);
    fs::rename(&tmp, path).map_err(io)
}

/// Read and verify an archive. Nothing is returned unless the whole file is
/// intact.
pub fn read_archive(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(archive_err(path, "missing archive header".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < mlen {
        return Err(archive_err(path, "truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..mlen])
        .map_err(|e| archive_err(path, format!("bad manifest: {e}")))?;
    let payload = &body[mlen..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(archive_err(
            path,
            format!(
                "payload is {} bytes, manifest expects {}",
                payload.len(),
                manifest.payload_bytes
            ),
        ));
    }
    if sha256_hex(payload) != manifest.payload_sha256 {
        return Err(archive_err(path, "payload checksum mismatch".into()));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for h in manifest.tensors {
        let n: usize = h.shape.iter().product();
        let start = h.offset as usize;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(archive_err(path, format!("entry `{}` out of bounds", h.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((h.name, Tensor::new(&h.shape, data)?));
    }
    Ok((manifest.meta, out))
}

fn archive_err(path: &Path, reason: String) -> TensorError {
    TensorError::Archive {
        path: path.display().to_string(),
        reason,
    }
}
