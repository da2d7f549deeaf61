//! MVT1 binary tensor files.
//!
//! Layout, all little-endian: the magic bytes `MVT1`, a dtype byte (1 = f32,
//! 2 = f64), a rank byte, `rank` u64 extents, then the row-major payload.
//! Rank-0 tensors hold one element; any zero extent gives an empty payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVT1";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 1,
            Payload::F64(_) => 2,
        }
    }
}

/// A tensor as stored on disk. Unlike [`Tensor`] it admits zero extents.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    shape: Vec<usize>,
    payload: Payload,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, payload: Payload) -> Result<Self> {
        if shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} exceeds 255", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != payload.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} needs {n} values, payload has {}",
                payload.len()
            )));
        }
        Ok(TensorFile { shape, payload })
    }

    pub fn from_tensor_f64(t: &Tensor) -> Self {
        TensorFile {
            shape: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        }
    }

    /// Narrows to f32; values not representable in f32 are rounded.
    pub fn from_tensor_f32(t: &Tensor) -> Self {
        TensorFile {
            shape: t.shape().to_vec(),
            payload: Payload::F32(t.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn encoded_len(&self) -> usize {
        let width = match self.payload {
            Payload::F32(_) => 4,
            Payload::F64(_) => 8,
        };
        6 + 8 * self.shape.len() + width * self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.push(self.payload.dtype());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Decodes one record from the front of `bytes`, returning it and the bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let truncated = || Error::Format("truncated MVT1 record".into());
        if bytes.len() < 6 {
            return Err(truncated());
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let dtype = bytes[4];
        let width = match dtype {
            1 => 4,
            2 => 8,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        };
        let rank = bytes[5] as usize;
        let mut pos = 6;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let raw = bytes.get(pos..pos + 8).ok_or_else(truncated)?;
            let d = u64::from_le_bytes(raw.try_into().expect("eight bytes"));
            shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?);
            pos += 8;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        let len = n
            .checked_mul(width)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let body = bytes.get(pos..pos + len).ok_or_else(truncated)?;
        let payload = if dtype == 1 {
            Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                    .collect(),
            )
        } else {
            Payload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                    .collect(),
            )
        };
        Ok((TensorFile { shape, payload }, pos + len))
    }

    /// Decodes a buffer holding exactly one record.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after MVT1 payload",
                bytes.len() - used
            )));
        }
        Ok(t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
