//! Binary tensor container shared by checkpoints and embedding files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "T1CP"  u32 version  u32 config_len  config (UTF-8)
//! u32 tensor_count
//! per tensor: u32 name_len  name  u8 dtype  u32 rank  u64 dims[rank]  payload
//! u32 crc32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"T1CP";
pub const VERSION: u32 = 1;

/// A tensor of either supported precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`; exact when the stored precision equals `T`.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    /// Wraps a tensor of the library's generic scalar without converting.
    pub fn from_scalar<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub config: String,
    pub tensors: Vec<(String, AnyTensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(len: usize, what: &str) -> Result<u32> {
    u32::try_from(len).map_err(|_| Error::invalid(format!("{what} too long for the container")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("container", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_payload<T: Scalar>(r: &mut Reader<'_>, dims: Vec<usize>, numel: usize) -> Result<Tensor<T>> {
    let bytes = r.take(numel * T::DTYPE.size())?;
    let data = bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(dims, data)
}

fn write_payload<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

impl Container {
    pub fn new(config: impl Into<String>) -> Self {
        Container {
            config: config.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: AnyTensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&AnyTensor> {
        self.get(name)
            .ok_or_else(|| Error::format("container", format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, len_u32(self.config.len(), "config text")?);
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, len_u32(self.tensors.len(), "tensor table")?);
        for (name, t) in &self.tensors {
            put_u32(&mut out, len_u32(name.len(), "tensor name")?);
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            put_u32(&mut out, len_u32(t.shape().len(), "tensor rank")?);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                AnyTensor::F32(t) => write_payload(&mut out, t),
                AnyTensor::F64(t) => write_payload(&mut out, t),
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format("container", "file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::format(
                "container",
                format!("CRC mismatch (stored {stored:08x}, computed {actual:08x})"),
            ));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("container", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("container", format!("unsupported version {version}")));
        }
        let clen = r.u32()? as usize;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| Error::format("container", "config text is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::format("container", "tensor name is not UTF-8"))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::format("container", format!("unknown dtype code {code} for {name:?}")))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(dtype.size()).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| Error::format("container", format!("dims of {name:?} exceed the payload")))?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(read_payload(&mut r, dims, numel)?),
                DType::F64 => AnyTensor::F64(read_payload(&mut r, dims, numel)?),
            };
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::format("container", "trailing bytes before checksum"));
        }
        Ok(Container { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
