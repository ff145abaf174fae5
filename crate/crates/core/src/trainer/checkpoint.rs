//! Binary checkpoint format.
//!
//! ```text
//! "CMAT"                magic
//! u32                   format version
//! u32 + bytes           model-kind tag
//! u32 + bytes           model config, key=value lines
//! u32                   entry count
//! per entry:
//!   u32 + bytes         name
//!   u8                  frozen flag
//!   u32                 rank
//!   u64 * rank          extents
//!   u64                 byte offset into the payload
//! f64 LE ...            payload
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::policy::{ModelConfig, ModelKind};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMAT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParameterStore, config: &ModelConfig) -> Result<Vec<u8>> {
    if store.kind() != config.kind.as_str() {
        return Err(Error::contract(format!(
            "store tagged {} saved with a {} config",
            store.kind(),
            config.kind
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, store.kind());
    put_str(&mut out, &config.to_meta());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (_, name, p) in store.iter() {
        put_str(&mut out, name);
        out.push(p.frozen as u8);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * p.value.numel() as u64;
    }
    for (_, _, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint. With `expected` set, a different kind tag is an error.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<ModelKind>) -> Result<(ModelConfig, ParameterStore)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let tag = r.string()?;
    let kind: ModelKind = tag
        .parse()
        .map_err(|_| Error::Checkpoint(format!("unknown model kind tag {tag:?}")))?;
    if let Some(want) = expected {
        if want != kind {
            return Err(Error::Checkpoint(format!("checkpoint holds a {kind} model, expected {want}")));
        }
    }
    let config = ModelConfig::from_meta(&r.string()?)?;
    if config.kind != kind {
        return Err(Error::Checkpoint("kind tag disagrees with model metadata".into()));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let name = r.string()?;
        let frozen = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad frozen flag {b} for {name}"))),
        };
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank} for {name}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        if offset != expected_offset {
            return Err(Error::Checkpoint(format!("offset of {name} is {offset}, expected {expected_offset}")));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|&n| n > 0 && n <= bytes.len() / 8)
            .ok_or_else(|| Error::Checkpoint(format!("bad shape {shape:?} for {name}")))?;
        expected_offset += 8 * numel as u64;
        manifest.push((name, frozen, shape, numel));
    }
    let payload = &bytes[r.at..];
    if payload.len() as u64 != expected_offset {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, manifest needs {expected_offset}",
            payload.len()
        )));
    }
    let mut store = ParameterStore::new(kind.as_str());
    let mut at = 0;
    for (name, frozen, shape, numel) in manifest {
        let data = payload[at..at + 8 * numel]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += 8 * numel;
        let id = store
            .register(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.set_frozen(id, frozen);
    }
    Ok((config, store))
}

pub fn save_checkpoint(store: &ParameterStore, config: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(store, config)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<ModelKind>) -> Result<(ModelConfig, ParameterStore)> {
    decode_checkpoint(&fs::read(path)?, expected)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not utf-8".into()))
    }
}
