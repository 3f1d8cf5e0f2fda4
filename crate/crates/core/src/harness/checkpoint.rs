//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "TSRCKPT\0"
//! version      u32
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 JSON
//! n_arrays     u32
//! per array:
//!   name_len   u32, name (UTF-8)
//!   dtype      u8   (1 = f64)
//!   ndim       u32, dims (u64 each)
//!   byte_len   u64, payload (little-endian f64)
//! checksum     32 bytes, SHA-256 of everything before it
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::write_atomic;
use crate::nets::{CodecKind, NetConfig, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TSRCKPT\0";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub stage: String,
    pub step: u64,
    pub seed: u64,
    /// RFC 3339 creation time; the Unix epoch unless explicitly stamped, so
    /// identical runs produce identical files.
    pub created: String,
    pub net: NetConfig,
    pub scale: usize,
    pub codec: CodecKind,
    pub cond: Vec<f64>,
    pub flow_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: ParamSet,
}

pub const EPOCH: &str = "1970-01-01T00:00:00Z";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in self.arrays.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((t.len() * 8) as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN || &bytes[..8] != MAGIC {
            return Err(Error::MalformedCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::ChecksumMismatch);
        }
        let mut r = Reader { buf: body, pos: 12 };
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::MalformedCheckpoint(format!("metadata: {e}")))?;
        let n = r.u32()?;
        let mut arrays = ParamSet::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::MalformedCheckpoint("array name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::MalformedCheckpoint(format!("dtype {dtype} for {name}")));
            }
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let byte_len = r.u64()? as usize;
            let count: usize = shape.iter().product();
            if byte_len != count * 8 {
                return Err(Error::MalformedCheckpoint(format!(
                    "{name}: payload {byte_len} bytes for shape {shape:?}"
                )));
            }
            let data = r
                .take(byte_len)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::MalformedCheckpoint("trailing bytes".into()));
        }
        Ok(Self { meta, arrays })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::MalformedCheckpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
