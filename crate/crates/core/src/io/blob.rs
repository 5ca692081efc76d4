//! Named tensor blobs: `u32` name length, UTF-8 name, `u8` dtype, `u32`
//! ndim, `u64` per dimension, then the little-endian row-major payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            c => Err(Error::Format(format!("unknown tensor dtype code {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorBlob {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl TensorBlob {
    pub fn f64(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            dtype: DType::F64,
            shape: t.shape().to_vec(),
            payload: t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: &[f32]) -> Self {
        Self { name: name.into(), dtype: DType::F32, shape, payload: data.iter().flat_map(|v| v.to_le_bytes()).collect() }
    }

    pub fn u8(name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self { name: name.into(), dtype: DType::U8, shape, payload: data }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decodes the payload to `f64` values (f32 and u8 widen exactly).
    pub fn values(&self) -> Vec<f64> {
        match self.dtype {
            DType::F64 => self.payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            DType::F32 => self.payload.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect(),
            DType::U8 => self.payload.iter().map(|&b| f64::from(b)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.values()).map_err(|e| Error::Format(format!("blob {}: {e}", self.name)))
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        4 + self.name.len() + 1 + 4 + 8 * self.shape.len() + self.payload.len()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.name.len() as u32).to_le_bytes())?;
        w.write_all(self.name.as_bytes())?;
        w.write_all(&[self.dtype as u8])?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&self.payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated tensor blob: {e}"));
        let name_len = read_u32(r).map_err(fmt)? as usize;
        if name_len > 1 << 16 {
            return Err(Error::Format(format!("tensor blob name length {name_len} is implausible")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(fmt)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor blob name is not UTF-8".into()))?;
        let mut code = [0u8];
        r.read_exact(&mut code).map_err(fmt)?;
        let dtype = DType::from_code(code[0])?;
        let ndim = read_u32(r).map_err(fmt)? as usize;
        if ndim > 16 {
            return Err(Error::Format(format!("tensor blob {name} has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(fmt)?;
            shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("dimension overflows usize".into()))?);
        }
        let bytes = shape
            .iter()
            .try_fold(dtype.size(), |acc: usize, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 34)
            .ok_or_else(|| Error::Format(format!("tensor blob {name} is too large")))?;
        let mut payload = vec![0u8; bytes];
        r.read_exact(&mut payload).map_err(fmt)?;
        Ok(Self { name, dtype, shape, payload })
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
