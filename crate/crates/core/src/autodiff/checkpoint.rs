//! Versioned binary container of named tensors.
//!
//! Layout (little endian): magic `NUCLCKPT`, `u32` version, `u32` number of
//! metadata entries followed by `(key, value)` strings, `u32` number of
//! tensors followed by `(name, u32 rank, u64 dims.., f64 data..)`. Strings
//! are a `u32` byte length and UTF-8 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::param::ParamStore;
use super::tensor::{Real, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"NUCLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>, meta: BTreeMap<String, String>) -> Self {
        Checkpoint {
            meta,
            tensors: store
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.to_f64_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.shape.len() as u32);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.saturating_mul(8) > buf.len() {
                return Err(Error::Checkpoint(format!("tensor {name} larger than the file")));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Writes to a sibling temp file first, then renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Copies tensors into `store` by name. Every parameter must be present
    /// with the same shape, and the checkpoint may not carry unknown names.
    pub fn apply_to<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut seen = vec![false; store.len()];
        let mut staged = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let id = store
                .by_name(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", t.name)))?;
            let expected = store.get(id).value.shape();
            if expected != t.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {}: checkpoint shape {:?}, model shape {:?}",
                    t.name, t.shape, expected
                )));
            }
            seen[id.0] = true;
            staged.push((id, Tensor::from_f64(&t.shape, &t.data)?));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let missing = &store.iter().nth(i).expect("index in range").name;
            return Err(Error::Checkpoint(format!("parameter {missing} missing from checkpoint")));
        }
        for (id, v) in staged {
            store.set_value(id, v)?;
        }
        Ok(())
    }
}
