//! Binary checkpoint format.
//!
//! ```text
//! "LSFT" | version u32 | body length u64 | body | crc32 u32
//! body = config length u32 | config text | record count u32 | records
//! record = name length u32 | name | dtype u8 | rank u32 | extents u32… | payload
//! ```
//!
//! All integers and payloads are little-endian. Batch-norm statistics are
//! stored as `<name>.running_mean` / `<name>.running_var` records.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LSFT";
const HEADER: usize = 4 + 4 + 8;

fn dtype_name(tag: u8) -> &'static str {
    match tag {
        1 => "f32",
        2 => "f64",
        _ => "unknown",
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn str(&mut self) -> Result<&'a str, CheckpointError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| CheckpointError::Malformed("non-UTF-8 text".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_record<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE_TAG);
    put_u32(out, shape.len());
    for &d in shape {
        put_u32(out, d);
    }
    for &v in data {
        v.write_le(out);
    }
}

/// Where a record's payload lands in a model.
enum Slot {
    Param(String),
    Mean(String),
    Var(String),
}

impl<T: Scalar> Model<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let text = self.config.to_text();
        put_u32(&mut body, text.len());
        body.extend_from_slice(text.as_bytes());
        put_u32(&mut body, self.params.len() + 2 * self.stats.len());
        for p in self.params.iter() {
            put_record(&mut body, &p.name, p.value.shape(), p.value.data());
        }
        for (name, s) in self.stats.iter() {
            put_record(&mut body, &format!("{name}.running_mean"), &[s.mean.len()], &s.mean);
            put_record(&mut body, &format!("{name}.running_var"), &[s.var.len()], &s.var);
        }
        let mut out = Vec::with_capacity(HEADER + body.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Validates framing and checksum, returning the body.
    fn body(bytes: &[u8]) -> Result<&[u8], CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEADER {
            return Err(CheckpointError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(HEADER))
            .ok_or(CheckpointError::Truncated)?;
        if bytes.len() < end + 4 {
            return Err(CheckpointError::Truncated);
        }
        if bytes.len() > end + 4 {
            return Err(CheckpointError::Malformed("trailing bytes after checksum".into()));
        }
        let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..end]) != stored {
            return Err(CheckpointError::Checksum);
        }
        Ok(&bytes[HEADER..end])
    }

    /// Rebuilds the stored model, configuration included.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = Self::body(bytes)?;
        let mut r = Reader { buf: body, pos: 0 };
        let config = ModelConfig::from_text(r.str()?)?;
        let mut model = Model::build(&config, 0)?;
        model.read_records(&mut r)?;
        Ok(model)
    }

    /// Loads stored tensors into this model's existing layout; the stored
    /// configuration is ignored, so a mismatched model is rejected at the
    /// first tensor that does not fit.
    pub fn load_weights(&mut self, bytes: &[u8]) -> Result<()> {
        let body = Self::body(bytes)?;
        let mut r = Reader { buf: body, pos: 0 };
        r.str()?;
        let mut staged = self.clone();
        staged.read_records(&mut r)?;
        *self = staged;
        Ok(())
    }

    fn slot(&self, name: &str) -> Option<(Slot, Vec<usize>)> {
        if let Some(p) = self.params.get(name) {
            return Some((Slot::Param(name.to_string()), p.value.shape().to_vec()));
        }
        for (suffix, is_mean) in [(".running_mean", true), (".running_var", false)] {
            if let Some(stat) = name.strip_suffix(suffix) {
                if let Some(s) = self.stats.get(stat) {
                    let slot = if is_mean {
                        Slot::Mean(stat.to_string())
                    } else {
                        Slot::Var(stat.to_string())
                    };
                    return Some((slot, vec![s.mean.len()]));
                }
            }
        }
        None
    }

    fn read_records(&mut self, r: &mut Reader) -> Result<()> {
        let count = r.u32()? as usize;
        let mut seen = std::collections::HashSet::new();
        let size = std::mem::size_of::<T>();
        for _ in 0..count {
            let name = r.str()?.to_string();
            let tag = r.u8()?;
            if tag != T::DTYPE_TAG {
                return Err(CheckpointError::DType {
                    found: dtype_name(tag),
                    expected: T::DTYPE,
                }
                .into());
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let (slot, expected) = self
                .slot(&name)
                .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
            if shape != expected {
                return Err(CheckpointError::TensorShape {
                    name,
                    found: shape,
                    expected,
                }
                .into());
            }
            let numel: usize = shape.iter().product();
            let data: Vec<T> = r.take(numel * size)?.chunks(size).map(T::read_le).collect();
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::Malformed(format!("tensor `{name}` stored twice")).into());
            }
            match slot {
                Slot::Param(n) => {
                    self.params.get_mut(&n).expect("slot exists").value = Tensor::new(shape, data)?;
                }
                Slot::Mean(n) => self.stats.get_mut(&n)?.mean = data,
                Slot::Var(n) => self.stats.get_mut(&n)?.var = data,
            }
        }
        if r.pos != r.buf.len() {
            return Err(CheckpointError::Malformed("unread bytes after the last tensor".into()).into());
        }
        for name in self.params.names() {
            if !seen.contains(name) {
                return Err(CheckpointError::MissingTensor(name.to_string()).into());
            }
        }
        for (name, _) in self.stats.iter() {
            for suffix in [".running_mean", ".running_var"] {
                let full = format!("{name}{suffix}");
                if !seen.contains(&full) {
                    return Err(CheckpointError::MissingTensor(full).into());
                }
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
