//! Binary parameter container.
//!
//! Layout: magic `"STRM"`, format version (u32 LE), record count (u64 LE),
//! then per record: name length (u32 LE) + UTF-8 name, dtype tag (u8),
//! rank (u32 LE), dims (u64 LE each), raw little-endian values. Values are
//! stored and restored bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STRM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Record {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    /// Raw little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl Record {
    pub fn num_elements(&self) -> usize {
        self.dims.iter().product()
    }
}

/// An ordered, name-indexed set of tensor records.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    records: Vec<Record>,
    index: BTreeMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate checkpoint record '{}'", name)));
        }
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size_bytes());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.index.insert(name.to_string(), self.records.len());
        self.records.push(Record {
            name: name.to_string(),
            dtype: T::DTYPE,
            dims: t.shape().to_vec(),
            bytes,
        });
        Ok(())
    }

    /// Insert a single named scalar (rank-1, one element).
    pub fn insert_scalar<T: Scalar>(&mut self, name: &str, v: T) -> Result<()> {
        self.insert_tensor(name, &Tensor::scalar(v))
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.index.get(name).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let rec = self
            .record(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record '{}'", name)))?;
        if rec.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "record '{}' has dtype {}, requested {}",
                name,
                rec.dtype,
                T::DTYPE
            )));
        }
        let size = T::DTYPE.size_bytes();
        let data: Vec<T> = rec.bytes.chunks_exact(size).map(T::read_le).collect();
        Tensor::from_vec(&rec.dims, data)
    }

    pub fn scalar_value<T: Scalar>(&self, name: &str) -> Result<T> {
        let t = self.tensor::<T>(name)?;
        if !t.is_scalar() {
            return Err(Error::Checkpoint(format!("record '{}' is not scalar", name)));
        }
        Ok(t.value())
    }

    /// `(name, dtype, dims)` triples in record order.
    pub fn manifest(&self) -> Vec<(String, Dtype, Vec<usize>)> {
        self.records.iter().map(|r| (r.name.clone(), r.dtype, r.dims.clone())).collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for rec in &self.records {
            w.write_all(&(rec.name.len() as u32).to_le_bytes())?;
            w.write_all(rec.name.as_bytes())?;
            w.write_all(&[rec.dtype.tag()])?;
            w.write_all(&(rec.dims.len() as u32).to_le_bytes())?;
            for &d in &rec.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&rec.bytes)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}", magic)));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", version)));
        }
        let count = read_u64(r)? as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Checkpoint(format!("record name not UTF-8: {}", e)))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let dtype = Dtype::from_tag(tag[0])
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {}", tag[0])))?;
            let rank = read_u32(r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(r)? as usize);
            }
            let nbytes = dims.iter().product::<usize>() * dtype.size_bytes();
            let mut bytes = vec![0u8; nbytes];
            r.read_exact(&mut bytes)?;
            if ckpt.index.contains_key(&name) {
                return Err(Error::Checkpoint(format!("duplicate record '{}'", name)));
            }
            ckpt.index.insert(name.clone(), ckpt.records.len());
            ckpt.records.push(Record { name, dtype, dims, bytes });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
