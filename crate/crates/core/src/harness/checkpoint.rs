//! Versioned, checksummed checkpoint files.
//!
//! Layout (little-endian): 8-byte magic, u32 format version, u32 topology hash, u32 CRC-32 of
//! the body, u64 body length, then the body as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::RunState;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HETLCKPT";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub topology_hash: u32,
    pub state: RunState,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(&ckpt.state)?;
    let mut out = Vec::with_capacity(HEADER + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.topology_hash.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes and checks magic, version, checksum and (if given) the expected topology hash.
pub fn decode_checkpoint(bytes: &[u8], expected_hash: Option<u32>) -> Result<Checkpoint> {
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let topology_hash = u32_at(12);
    let crc = u32_at(16);
    let len = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER..];
    if body.len() != len {
        return Err(Error::Checkpoint(format!("body is {} bytes, header says {len}", body.len())));
    }
    if crc32fast::hash(body) != crc {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    if let Some(h) = expected_hash {
        if h != topology_hash {
            return Err(Error::Checkpoint(format!(
                "topology hash {topology_hash:08x} does not match the config ({h:08x})"
            )));
        }
    }
    Ok(Checkpoint {
        topology_hash,
        state: serde_json::from_slice(body)?,
    })
}

pub fn checkpoint_save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: &Path, expected_hash: Option<u32>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected_hash)
}
