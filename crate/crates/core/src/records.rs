//! Named tensor records, the binary unit shared by checkpoints and datasets.
//!
//! Layout of one record (all integers little-endian):
//! `u32 name_len | name bytes | u8 dtype | u32 rank | u64 extent * rank | payload`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::{numel_of, DType, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl RecordData {
    pub fn dtype(&self) -> DType {
        match self {
            RecordData::F32(_) => DType::F32,
            RecordData::F64(_) => DType::F64,
            RecordData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl TensorRecord {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F64 => RecordData::F64(t.to_f64_vec()),
            _ => RecordData::F32(t.to_f64_vec().into_iter().map(|v| v as f32).collect()),
        };
        Self { name: name.to_string(), shape: t.shape().to_vec(), data }
    }

    pub fn from_f32(name: &str, shape: &[usize], values: Vec<f32>) -> Self {
        Self { name: name.to_string(), shape: shape.to_vec(), data: RecordData::F32(values) }
    }

    pub fn from_u8(name: &str, shape: &[usize], values: Vec<u8>) -> Self {
        Self { name: name.to_string(), shape: shape.to_vec(), data: RecordData::U8(values) }
    }

    /// Values as `f64` regardless of the stored dtype.
    pub fn values_f64(&self) -> Vec<f64> {
        match &self.data {
            RecordData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            RecordData::F64(v) => v.clone(),
            RecordData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64(&self.shape, &self.values_f64())
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            RecordData::U8(v) => Ok(v),
            _ => Err(Error::Format(format!("record {} is not u8", self.name))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let name = self.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[self.data.dtype() as u8])?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        match &self.data {
            RecordData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
            RecordData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
            RecordData::U8(v) => w.write_all(v),
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 + self.name.len() + 1 + 4 + 8 * self.shape.len() + self.data.len() * self.data.dtype().size()
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let name_len = read_u32(r)? as usize;
        if name_len > 1 << 16 {
            return Err(Error::Format(format!("record name length {name_len} is implausible")));
        }
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let mut tag = [0u8; 1];
        read_exact(r, &mut tag)?;
        let dtype = DType::from_tag(tag[0])?;
        let rank = read_u32(r)? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("record {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let n = numel_of(&shape);
        if n > 1 << 32 {
            return Err(Error::Format(format!("record {name} is too large")));
        }
        let mut bytes = vec![0u8; n * dtype.size()];
        read_exact(r, &mut bytes)?;
        let data = match dtype {
            DType::F32 => RecordData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => RecordData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => RecordData::U8(bytes),
        };
        Ok(Self { name, shape, data })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format(format!("truncated record: {e}")))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_each_dtype() {
        let recs = [
            TensorRecord::from_f32("a", &[2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.0]),
            TensorRecord { name: "b.c".into(), shape: vec![3], data: RecordData::F64(vec![0.1, 0.2, 0.3]) },
            TensorRecord::from_u8("img", &[1, 2, 1], vec![0, 255]),
            TensorRecord::from_f32("s", &[], vec![7.0]),
        ];
        let mut buf = Vec::new();
        for r in &recs {
            r.write_to(&mut buf).unwrap();
        }
        assert_eq!(buf.len(), recs.iter().map(|r| r.encoded_len()).sum::<usize>());
        let mut cur = std::io::Cursor::new(buf);
        for r in &recs {
            assert_eq!(&TensorRecord::read_from(&mut cur).unwrap(), r);
        }
    }

    #[test]
    fn truncated_is_format_error() {
        let mut buf = Vec::new();
        TensorRecord::from_u8("x", &[4], vec![1, 2, 3, 4]).write_to(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(TensorRecord::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
