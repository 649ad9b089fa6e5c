//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "DGKD"
//! version      u32
//! descriptor   u32 length + UTF-8 JSON {"spec": ModelSpec, "meta": CheckpointMeta}
//! tensor count u32
//! per tensor:  u32 name length + UTF-8 name, u8 dtype tag (1 = f64),
//!              u32 rank, rank × u64 extents, extents-product × f64 payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::{ModelSpec, ParameterSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGKD";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    spec: ModelSpec,
    meta: CheckpointMeta,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let descriptor = serde_json::to_string(&Descriptor {
        spec: ckpt.spec.clone(),
        meta: ckpt.meta.clone(),
    })?;
    let mut out = Vec::with_capacity(64 + descriptor.len() + 8 * ckpt.params.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &descriptor);
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in ckpt.params.iter() {
        put_str(&mut out, name);
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Corrupt(format!("file ends inside {what} at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Corrupt(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("missing DGKD magic".into()));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let descriptor: Descriptor = serde_json::from_str(&c.string("descriptor")?)
        .map_err(|e| Error::Corrupt(format!("descriptor: {e}")))?;
    let count = c.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = c.string("tensor name")?;
        let dtype = c.take(1, "dtype tag")?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Corrupt(format!("{name}: unknown dtype tag {dtype}")));
        }
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Corrupt(format!("{name}: extents overflow")))?;
        let payload = c.take(numel, "tensor payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - c.pos
        )));
    }
    let params = ParameterSet::from_tensors(descriptor.meta.seed, tensors);
    if !params.matches(&descriptor.spec) {
        return Err(Error::Corrupt(format!(
            "tensors do not match declared spec {}",
            descriptor.spec
        )));
    }
    Ok(Checkpoint {
        spec: descriptor.spec,
        params,
        meta: descriptor.meta,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
