//! Checkpoint file layout:
//!
//! ```text
//! "RPOSECKP" | header_len: u64 LE | header JSON (header_len bytes) | payload
//! ```
//!
//! The header lists every tensor with its byte range inside the payload and
//! a CRC32 of the whole payload. The payload is little-endian `f32`.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RPOSECKP";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    crc32_of_payload: u32,
}

/// Contents of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: serde_json::Value,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    /// Checks that the stored tensors match `expected` name-for-name and
    /// shape-for-shape, then returns the stored parameters.
    pub fn into_params_matching(self, expected: &ParamStore<f32>) -> Result<ParamStore<f32>, CheckpointError> {
        for (name, t) in expected.iter() {
            match self.params.get(name) {
                None => return Err(CheckpointError::ShapeMismatch(format!("missing tensor {name:?}"))),
                Some(s) if s.shape() != t.shape() => {
                    return Err(CheckpointError::ShapeMismatch(format!(
                        "{name}: stored {:?}, expected {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.params.names().find(|n| !expected.contains(n)) {
            return Err(CheckpointError::ShapeMismatch(format!("unexpected tensor {extra:?}")));
        }
        Ok(self.params)
    }
}

pub fn save_checkpoint(
    params: &ParamStore<f32>,
    model_config: &impl Serialize,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let mut payload = Vec::with_capacity(params.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
            byte_len: payload.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_config: serde_json::to_value(model_config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
        tensors,
        crc32_of_payload: crc32fast::hash(&payload),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes)
}

fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("file shorter than the fixed prefix".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(header_len).ok_or_else(|| CheckpointError::Corrupt("header length overflow".into()))?;
    if bytes.len() < header_end {
        return Err(CheckpointError::Truncated("header extends past end of file".into()));
    }
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CheckpointError::Version(header.format_version));
    }
    let payload = &bytes[header_end..];
    let expected_len: u64 = header.tensors.iter().map(|t| t.byte_len).sum();
    if (payload.len() as u64) < expected_len {
        return Err(CheckpointError::Truncated(format!("payload has {} of {expected_len} bytes", payload.len())));
    }
    if payload.len() as u64 > expected_len {
        return Err(CheckpointError::Corrupt("trailing bytes after payload".into()));
    }
    if crc32fast::hash(payload) != header.crc32_of_payload {
        return Err(CheckpointError::Corrupt("payload checksum mismatch".into()));
    }
    let mut params = ParamStore::new();
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        if entry.byte_len != 4 * numel as u64 {
            return Err(CheckpointError::Corrupt(format!("{}: byte length disagrees with shape", entry.name)));
        }
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_len as usize;
        let raw = payload.get(start..end).ok_or_else(|| CheckpointError::Corrupt(format!("{}: range out of payload", entry.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        params.insert(entry.name, t).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    Ok(Checkpoint { model_config: header.model_config, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-7]).unwrap()).unwrap();
        s.insert("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        s
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let s = sample();
        save_checkpoint(&s, &serde_json::json!({"d_model": 4}), &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model_config["d_model"], 4);
        for (name, t) in s.iter() {
            let l = ck.params.get(name).unwrap();
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = l.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let path2 = dir.path().join("d.ckpt");
        save_checkpoint(&ck.params, &ck.model_config, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    fn saved_bytes() -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&sample(), &serde_json::json!({}), &path).unwrap();
        fs::read(path).unwrap()
    }

    #[test]
    fn flipped_checksum_is_corrupt() {
        let bytes = saved_bytes();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let key = "\"crc32_of_payload\":";
        let pos = text.find(key).unwrap() + key.len();
        let mut bytes = bytes;
        // change the first digit of the checksum
        bytes[pos] = if bytes[pos] == b'1' { b'2' } else { b'1' };
        assert!(matches!(parse_checkpoint(&bytes), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn truncated_payload_detected() {
        let bytes = saved_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(parse_checkpoint(cut), Err(CheckpointError::Truncated(_))));
        assert!(matches!(parse_checkpoint(&bytes[..10]), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn bad_magic_detected() {
        let mut bytes = saved_bytes();
        bytes[0] = b'X';
        assert!(matches!(parse_checkpoint(&bytes), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn shape_mismatch_detected() {
        let ck = Checkpoint { model_config: serde_json::json!({}), params: sample() };
        let mut expected = sample();
        expected.get_mut("b").map(|t| *t = Tensor::zeros(&[4]));
        assert!(matches!(ck.clone().into_params_matching(&expected), Err(CheckpointError::ShapeMismatch(_))));
        assert!(ck.into_params_matching(&sample()).is_ok());
    }
}
