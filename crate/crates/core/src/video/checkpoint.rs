//! Binary checkpoint format.
//!
//! ```text
//! magic      4 bytes   "VSTG"
//! version    u32 LE    CHECKPOINT_VERSION
//! seed       u64 LE
//! config_len u32 LE, then config_len bytes of UTF-8 config echo
//! count      u32 LE    number of tensors
//! manifest   count × { name_len u16 LE, name UTF-8, dtype u8 (0 = f32, 1 = f64),
//!                      rank u8, rank × dim u32 LE }   sorted by name
//! payload    each tensor's values, little-endian, in manifest order
//! ```
//!
//! No bytes may follow the last payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tensor::{DType, Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VSTG";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn bit_eq(&self, other: &StoredTensor) -> bool {
        match (self, other) {
            (StoredTensor::F32(a), StoredTensor::F32(b)) => a.bit_eq(b),
            (StoredTensor::F64(a), StoredTensor::F64(b)) => a.bit_eq(b),
            _ => false,
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| v.to_le(out)),
            StoredTensor::F64(t) => t.data().iter().for_each(|v| v.to_le(out)),
        }
    }
}

pub trait IntoStored: Element {
    fn into_stored(t: Tensor<Self>) -> StoredTensor;
}

impl IntoStored for f32 {
    fn into_stored(t: Tensor<f32>) -> StoredTensor {
        StoredTensor::F32(t)
    }
}

impl IntoStored for f64 {
    fn into_stored(t: Tensor<f64>) -> StoredTensor {
        StoredTensor::F64(t)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    /// The resolved configuration, echoed as text.
    pub config: String,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new(seed: u64, config: impl Into<String>) -> Self {
        Checkpoint { seed, config: config.into(), tensors: BTreeMap::new() }
    }

    pub fn insert<T: IntoStored>(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), T::into_stored(t));
    }

    /// Stores every parameter as `prefix.name`.
    pub fn insert_params<T: IntoStored>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for (name, t) in params.iter() {
            self.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Collects every tensor stored under `prefix.` back into a parameter set.
    pub fn params<T: Element>(&self, prefix: &str) -> ParamSet<T> {
        let lead = format!("{prefix}.");
        let mut out = ParamSet::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&lead) {
                out.insert(rest, t.to_tensor());
            }
        }
        out
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.seed == other.seed
            && self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in self.tensors.values() {
            t.write_payload(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::NotACheckpoint);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let seed = r.u64()?;
        let config_len = r.u32()? as usize;
        let config = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::Corrupt("config echo is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let dtype_code = r.u8()?;
            let dtype = DType::from_code(dtype_code)
                .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` has unknown dtype {dtype_code}")))?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if let Some((prev, _, _)) = manifest.last() {
                if *prev >= name {
                    return Err(Error::Corrupt(format!("manifest not sorted at `{name}`")));
                }
            }
            manifest.push((name, dtype, dims));
        }
        let payload_len: usize = manifest.iter().map(|(_, dt, dims)| dt.size() * dims.iter().product::<usize>()).sum();
        let expected = r.pos + payload_len;
        if bytes.len() != expected {
            return Err(Error::LengthMismatch { expected, found: bytes.len() });
        }
        let mut tensors = BTreeMap::new();
        for (name, dtype, dims) in manifest {
            let n: usize = dims.iter().product();
            let raw = r.take(n * dtype.size())?;
            let stored = match dtype {
                DType::F32 => StoredTensor::F32(decode(dims, raw, &name)?),
                DType::F64 => StoredTensor::F64(decode(dims, raw, &name)?),
            };
            tensors.insert(name, stored);
        }
        Ok(Checkpoint { seed, config, tensors })
    }
}

fn decode<T: Element>(dims: Vec<usize>, raw: &[u8], name: &str) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = raw.chunks_exact(size).map(T::from_le).collect();
    Tensor::new(dims, data).map_err(|e| Error::Corrupt(format!("tensor `{name}`: {e}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::LengthMismatch { expected: self.pos + n, found: self.bytes.len() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
