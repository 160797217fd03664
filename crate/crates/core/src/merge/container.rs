//! `MVTC` tensor container: a flat, alignment-free binary file of named f32
//! tensors.
//!
//! ```text
//! magic      4 bytes  "MVTC"
//! version    u32 LE   (1)
//! count      u32 LE
//! per entry:
//!   name_len u32 LE, name UTF-8 bytes
//!   dtype    u8       (0 = f32)
//!   rank     u8
//!   dims     rank x u64 LE
//!   data     product(dims) x element, little-endian
//! ```

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"MVTC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::CorruptContainer(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::CorruptContainer(format!(
                "rank {} exceeds 255",
                shape.len()
            )));
        }
        let numel = numel(&shape)?;
        if numel != data.len() as u64 {
            return Err(Error::CorruptContainer(format!(
                "shape {shape:?} holds {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self {
            dtype: DType::F32,
            shape,
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

fn numel(shape: &[u64]) -> Result<u64> {
    shape.iter().try_fold(1u64, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::CorruptContainer(format!("shape {shape:?} overflows")))
    })
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: IndexMap<String, Tensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::CorruptContainer(format!("duplicate tensor name '{name}'")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .entries
            .iter()
            .map(|(n, t)| 4 + n.len() + 2 + 8 * t.shape.len() + t.dtype.size() * t.numel())
            .sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.dtype.code());
            out.push(tensor.shape.len() as u8);
            for dim in &tensor.shape {
                out.extend_from_slice(&dim.to_le_bytes());
            }
            for x in &tensor.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::CorruptContainer("bad magic, not an MVTC file".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::CorruptContainer(format!(
                "unsupported format version {version}"
            )));
        }
        let count = r.u32("entry count")?;
        let mut container = TensorContainer::new();
        for i in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::CorruptContainer(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let dtype_code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(dtype_code).ok_or_else(|| {
                Error::CorruptContainer(format!("'{name}': unknown dtype code {dtype_code}"))
            })?;
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank).map(|_| r.u64("dim")).collect::<Result<Vec<_>>>()?;
            let n = numel(&shape)?;
            let byte_len = n
                .checked_mul(dtype.size() as u64)
                .filter(|&b| b <= (r.bytes.len() - r.pos) as u64)
                .ok_or_else(|| Error::CorruptContainer(format!("'{name}': truncated data")))?;
            let data = r
                .take(byte_len as usize, "data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor =
                Tensor::new(shape, data).map_err(|e| Error::CorruptContainer(format!("'{name}': {e}")))?;
            container.insert(name, tensor)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptContainer(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(container)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptContainer(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }
}
