//! Binary container shared by model and prefix checkpoints.
//!
//! Layout: magic `FPTCKPT\0`, u32 format version, u64 header length, JSON
//! header, u32 block count, then per block a u32-length name, u32 rank,
//! u64 dims and little-endian f64 values. All integers are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{LanguageModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"FPTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 over names, shapes and values of the given blocks.
pub fn params_checksum<'t>(blocks: impl Iterator<Item = (String, &'t Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in blocks {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.values() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Serializes `header` and `blocks`. The header gains `checksum` and is
/// written with sorted keys so equal content gives equal bytes.
pub fn encode(mut header: Value, blocks: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let Value::Object(map) = &mut header else {
        return Err(Error::Format("checkpoint header must be a JSON object".into()));
    };
    map.insert("checksum".into(), Value::String(params_checksum(blocks.iter().map(|(n, t)| (n.clone(), *t)))));
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'b> {
    bytes: &'b [u8],
    at: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a container and verifies its checksum.
pub fn decode(bytes: &[u8]) -> Result<(Value, Vec<(String, Tensor)>)> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = c.u64()? as usize;
    let header: Value = serde_json::from_slice(c.take(header_len)?)?;
    let count = c.u32()? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("block name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format("block size overflow".into()))?;
        let payload = c.take(numel.checked_mul(8).ok_or_else(|| Error::Format("block size overflow".into()))?)?;
        let values = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        blocks.push((name, Tensor::new(shape, values).map_err(|e| Error::Format(e.to_string()))?));
    }
    if c.at != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint blocks".into()));
    }
    let stored = header.get("checksum").and_then(Value::as_str).unwrap_or_default();
    let actual = params_checksum(blocks.iter().map(|(n, t)| (n.clone(), t)));
    if stored != actual {
        return Err(Error::Contract(format!("checkpoint checksum mismatch: header {stored}, payload {actual}")));
    }
    Ok((header, blocks))
}

pub fn write_file(path: &Path, header: Value, blocks: &[(String, &Tensor)]) -> Result<()> {
    let bytes = encode(header, blocks)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(Value, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

impl LanguageModel {
    pub fn to_bytes(&self, metadata: Value) -> Result<Vec<u8>> {
        let header = json!({ "kind": "model", "config": self.config, "metadata": metadata });
        encode(header, &self.named_params())
    }

    pub fn save(&self, path: &Path, metadata: Value) -> Result<()> {
        let bytes = self.to_bytes(metadata)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Value)> {
        let (header, blocks) = decode(bytes)?;
        Self::from_parts(header, blocks)
    }

    pub fn load(path: &Path) -> Result<(Self, Value)> {
        let (header, blocks) = read_file(path)?;
        Self::from_parts(header, blocks)
    }

    fn from_parts(header: Value, blocks: Vec<(String, Tensor)>) -> Result<(Self, Value)> {
        if header.get("kind").and_then(Value::as_str) != Some("model") {
            return Err(Error::Format("checkpoint does not hold a language model".into()));
        }
        let config: ModelConfig = serde_json::from_value(header["config"].clone())?;
        let mut model = LanguageModel::new(config)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != blocks.len() {
            return Err(Error::Format(format!("expected {} parameter blocks, found {}", names.len(), blocks.len())));
        }
        for ((want, slot), (name, t)) in names.iter().zip(model.params_mut()).zip(blocks) {
            if *want != name || slot.shape() != t.shape() {
                return Err(Error::Format(format!("block {name} {:?} does not match {want}", t.shape())));
            }
            *slot = t;
        }
        Ok((model, header.get("metadata").cloned().unwrap_or(Value::Null)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LanguageModel {
        LanguageModel::new(ModelConfig {
            vocab_size: 11,
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_ff: 8,
            max_seq_len: 6,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn byte_identical_round_trip() {
        let m = tiny();
        let bytes = m.to_bytes(json!({"steps": 3})).unwrap();
        let (back, meta) = LanguageModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta["steps"], 3);
        assert_eq!(back.to_bytes(meta).unwrap(), bytes);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = tiny().to_bytes(Value::Null).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(matches!(LanguageModel::from_bytes(&bytes), Err(Error::Contract(_))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let bytes = tiny().to_bytes(Value::Null).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn checksum_depends_on_values() {
        let a = tiny();
        let mut b = a.clone();
        b.head_b.values_mut()[0] = 1e-300;
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum(), a.clone().checksum());
    }
}
