//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "BRGANCKP" | u32 version | u32 meta_len | meta (JSON)
//! table "model"     : u32 count, then count tensor records
//! table "optimizer" : u32 count, then count tensor records
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! A tensor record is `u16 name_len | name | u8 dtype | u8 ndim | u64 dims.. |
//! u64 byte_len | raw little-endian values`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"BRGANCKP";
pub const VERSION: u32 = 1;

/// A tensor as stored: element type and raw bytes, independent of `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<T: Element>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes into `T`, converting through f64 when the stored type differs.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let size = self.dtype.size();
        let data: Vec<T> = match self.dtype {
            d if d == T::DTYPE => self.bytes.chunks_exact(size).map(T::read_le).collect(),
            DType::F32 => self
                .bytes
                .chunks_exact(size)
                .map(|c| T::from_f64(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(size)
                .map(|c| T::from_f64(f64::read_le(c)))
                .collect(),
        };
        Tensor::from_vec(&self.shape, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container<M> {
    pub meta: M,
    pub model: Vec<RawTensor>,
    pub optimizer: Vec<RawTensor>,
}

fn put_table(out: &mut Vec<u8>, table: &[RawTensor]) {
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for t in table {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype.code());
        out.push(t.shape.len() as u8);
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(t.bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&t.bytes);
    }
}

impl<M: Serialize> Container<M> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::config(format!("checkpoint metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        put_table(&mut out, &self.model);
        put_table(&mut out, &self.optimizer);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = self.to_bytes()?;
        // write-then-rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!("while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn table(&mut self, which: &str) -> Result<Vec<RawTensor>> {
        let count = self.u32(which)?;
        let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let len = self.u16("tensor name")? as usize;
            let name = String::from_utf8(self.take(len, "tensor name")?.to_vec())
                .map_err(|_| Error::Truncated("tensor name is not UTF-8".into()))?;
            let code = self.u8("dtype")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Truncated(format!("unknown dtype code {code} for {name}")))?;
            let ndim = self.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u64("shape")? as usize);
            }
            let byte_len = self.u64("byte length")? as usize;
            let expected = shape.iter().product::<usize>() * dtype.size();
            if byte_len != expected {
                return Err(Error::Truncated(format!(
                    "{name}: {byte_len} bytes for shape {shape:?}"
                )));
            }
            let bytes = self.take(byte_len, &name)?.to_vec();
            out.push(RawTensor {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        Ok(out)
    }
}

impl<M: for<'de> Deserialize<'de>> Container<M> {
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated(format!("{}: no checksum", path.display())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let meta_len = r.u32("metadata length")? as usize;
        let meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::format(path, format!("checkpoint metadata: {e}")))?;
        let model = r.table("model table")?;
        let optimizer = r.table("optimizer table")?;
        if r.pos != body.len() {
            return Err(Error::format(path, "trailing bytes after the tensor tables"));
        }
        Ok(Self {
            meta,
            model,
            optimizer,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
