//! Binary checkpoint format.
//!
//! ```text
//! "GRMN" | u32 version | u64 architecture hash | u32 record count | records…
//! [ "OPT0" | u64 step | u32 record count | records… ]
//! record = u16 name length | UTF-8 name | u8 dtype | u8 rank | rank × u32 extents | little-endian values
//! ```
//! All integers are little-endian. dtype 0 is 32-bit real, 1 is 64-bit real.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"GRMN";
pub const VERSION: u32 = 1;
pub const OPTIMIZER_MARKER: [u8; 4] = *b"OPT0";

#[derive(Clone, Debug, PartialEq)]
pub enum RecordValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RecordValues {
    fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: RecordValues,
}

impl Record {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let values = match T::DTYPE_TAG {
            0 => RecordValues::F32(t.data().iter().map(|v| v.to_f64_lossy() as f32).collect()),
            _ => RecordValues::F64(t.data().iter().map(|v| v.to_f64_lossy()).collect()),
        };
        Self { name: name.into(), shape: t.shape().to_vec(), values }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data = match &self.values {
            RecordValues::F32(v) => v.iter().map(|&x| T::cast(x as f64)).collect(),
            RecordValues::F64(v) => v.iter().map(|&x| T::cast(x)).collect(),
        };
        Tensor::from_vec(&self.shape, data).map_err(|e| Error::CheckpointFormat(format!("record {}: {e}", self.name)))
    }

    pub fn scalar_f64(name: impl Into<String>, value: f64) -> Self {
        Self { name: name.into(), shape: vec![1], values: RecordValues::F64(vec![value]) }
    }

    pub fn first_f64(&self) -> Option<f64> {
        match &self.values {
            RecordValues::F32(v) => v.first().map(|&x| x as f64),
            RecordValues::F64(v) => v.first().copied(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSection {
    pub step: u64,
    pub records: Vec<Record>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch_hash: u64,
    pub records: Vec<Record>,
    pub optimizer: Option<OptimizerSection>,
}

fn write_records(out: &mut Vec<u8>, records: &[Record]) {
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        match &r.values {
            RecordValues::F32(_) => out.push(0),
            RecordValues::F64(_) => out.push(1),
        }
        out.push(r.shape.len() as u8);
        for &e in &r.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        match &r.values {
            RecordValues::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RecordValues::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CheckpointFormat(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.bytes.len()
            )));
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

    fn records(&mut self) -> Result<Vec<Record>> {
        let count = self.u32("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = self.u16("name length")? as usize;
            let name = std::str::from_utf8(self.take(name_len, "record name")?)
                .map_err(|_| Error::CheckpointFormat("record name is not UTF-8".into()))?
                .to_string();
            let dtype = self.u8("dtype")?;
            let rank = self.u8("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::CheckpointFormat(format!("record {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32("extent")? as usize);
            }
            let len: usize = shape.iter().product();
            let values = match dtype {
                0 => RecordValues::F32(
                    self.take(len.checked_mul(4).ok_or_else(|| overflow(&name))?, "values")?
                        .chunks_exact(4)
                        .map(f32::read_le)
                        .collect(),
                ),
                1 => RecordValues::F64(
                    self.take(len.checked_mul(8).ok_or_else(|| overflow(&name))?, "values")?
                        .chunks_exact(8)
                        .map(f64::read_le)
                        .collect(),
                ),
                other => return Err(Error::CheckpointFormat(format!("record {name} has unknown dtype {other}"))),
            };
            debug_assert_eq!(values.len(), len);
            records.push(Record { name, shape, values });
        }
        Ok(records)
    }
}

fn overflow(name: &str) -> Error {
    Error::CheckpointFormat(format!("record {name} is implausibly large"))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.arch_hash.to_le_bytes());
        write_records(&mut out, &self.records);
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(&OPTIMIZER_MARKER);
            out.extend_from_slice(&opt.step.to_le_bytes());
            write_records(&mut out, &opt.records);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::CheckpointFormat(format!("bad magic bytes {magic:02x?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::CheckpointFormat(format!("unsupported version {version}")));
        }
        let arch_hash = r.u64("architecture hash")?;
        let records = r.records()?;
        let optimizer = if r.pos == bytes.len() {
            None
        } else {
            let marker = r.take(4, "optimizer marker")?;
            if marker != OPTIMIZER_MARKER {
                return Err(Error::CheckpointFormat(format!("unexpected trailing bytes {marker:02x?}")));
            }
            let step = r.u64("optimizer step")?;
            let records = r.records()?;
            Some(OptimizerSection { step, records })
        };
        if r.pos != bytes.len() {
            return Err(Error::CheckpointFormat(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { arch_hash, records, optimizer })
    }

    pub fn find(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }
}
