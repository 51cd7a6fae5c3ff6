//! The `.aarr` binary array format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AARR" | u32 version=1 | u8 dtype | 3 reserved bytes | u32 ndim | ndim x u32 extents | payload
//! ```
//!
//! The payload is row-major. dtype codes: 0 = f32, 1 = f64, 2 = u8, 3 = u32.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AARR";
pub const VERSION: u32 = 1;
const MAX_NDIM: u32 = 8;
const HEADER_FIXED: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    U32 = 3,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            3 => Some(DType::U32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A decoded array, typed by its on-disk dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
    U32 { shape: Vec<usize>, data: Vec<u32> },
}

impl Array {
    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F32 { shape, .. }
            | Array::F64 { shape, .. }
            | Array::U8 { shape, .. }
            | Array::U32 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Array::F32 { .. } => DType::F32,
            Array::F64 { .. } => DType::F64,
            Array::U8 { .. } => DType::U8,
            Array::U32 { .. } => DType::U32,
        }
    }

    /// Converts float payloads into a tensor. f32 widens exactly.
    pub fn into_tensor(self) -> Result<Tensor> {
        match self {
            Array::F64 { shape, data } => Tensor::new(shape, data),
            Array::F32 { shape, data } => {
                Tensor::new(shape, data.into_iter().map(f64::from).collect())
            }
            other => Err(Error::format(
                8,
                format!("expected a float array, found {:?}", other.dtype()),
            )),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>)> {
        match self {
            Array::U8 { shape, data } => Ok((shape, data)),
            other => Err(Error::format(8, format!("expected u8, found {:?}", other.dtype()))),
        }
    }

    pub fn into_u32(self) -> Result<(Vec<usize>, Vec<u32>)> {
        match self {
            Array::U32 { shape, data } => Ok((shape, data)),
            other => Err(Error::format(8, format!("expected u32, found {:?}", other.dtype()))),
        }
    }
}

impl From<&Tensor> for Array {
    fn from(t: &Tensor) -> Self {
        Array::F64 {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

pub fn encode(array: &Array) -> Vec<u8> {
    let shape = array.shape();
    let numel: usize = shape.iter().product();
    let mut out =
        Vec::with_capacity(HEADER_FIXED + 4 * shape.len() + numel * array.dtype().size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(array.dtype() as u8);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match array {
        Array::F32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Array::F64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Array::U8 { data, .. } => out.extend_from_slice(data),
        Array::U32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!(
                        "truncated {what}: need {n} bytes, {} available",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Array> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"AARR\""));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let code = c.take(1, "dtype")?[0];
    let dtype =
        DType::from_code(code).ok_or_else(|| Error::format(8, format!("unknown dtype {code}")))?;
    c.take(3, "reserved bytes")?;
    let ndim = c.u32("ndim")?;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::format(12, format!("ndim {ndim} outside 1..={MAX_NDIM}")));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for i in 0..ndim {
        let offset = c.pos as u64;
        let d = c.u32("extents")?;
        if d == 0 {
            return Err(Error::format(offset, format!("extent {i} is zero")));
        }
        shape.push(d as usize);
    }
    let payload_at = c.pos as u64;
    let payload_len = shape
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(payload_at, format!("extents {shape:?} overflow")))?;
    let payload = c.take(payload_len, "payload")?;
    if c.pos != bytes.len() {
        return Err(Error::format(
            c.pos as u64,
            format!("{} trailing bytes", bytes.len() - c.pos),
        ));
    }
    Ok(match dtype {
        DType::F32 => Array::F32 {
            shape,
            data: payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        },
        DType::F64 => Array::F64 {
            shape,
            data: payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        },
        DType::U8 => Array::U8 {
            shape,
            data: payload.to_vec(),
        },
        DType::U32 => Array::U32 {
            shape,
            data: payload
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        },
    })
}

pub fn write_array(path: &Path, array: &Array) -> Result<()> {
    std::fs::write(path, encode(array)).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<Array> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { offset, reason } => Error::Format {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_array(path, &Array::from(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_array(path)?.into_tensor()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dtype: u8, extents: &[u32]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"AARR");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.push(dtype);
        b.extend_from_slice(&[0, 0, 0]);
        b.extend_from_slice(&(extents.len() as u32).to_le_bytes());
        for e in extents {
            b.extend_from_slice(&e.to_le_bytes());
        }
        b
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let bytes = encode(&Array::from(&t));
        let mut expected = header(1, &[2, 3]);
        for v in 1..=6 {
            expected.extend_from_slice(&(v as f64).to_le_bytes());
        }
        assert_eq!(bytes, expected);
        assert_eq!(decode(&bytes).unwrap().into_tensor().unwrap(), t);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode(&Array::from(&Tensor::scalar(1.0)));
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::Format { offset: 0, reason }) => assert!(reason.contains("magic")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut bytes = header(1, &[2, 3]);
        bytes.extend_from_slice(&[0u8; 40]);
        match decode(&bytes) {
            Err(Error::Format { offset, reason }) => {
                assert_eq!(offset, 24);
                assert!(reason.contains("need 48 bytes, 40 available"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_version_and_dtype() {
        let mut bytes = header(1, &[1]);
        bytes.extend_from_slice(&0f64.to_le_bytes());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::Format { offset: 4, .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn overflowing_extents() {
        let bytes = header(1, &[u32::MAX, u32::MAX, u32::MAX]);
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 28, .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&Array::U8 {
            shape: vec![2],
            data: vec![1, 2],
        });
        bytes.push(0);
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn f32_widens() {
        let a = Array::F32 {
            shape: vec![2],
            data: vec![0.5, -1.25],
        };
        let t = decode(&encode(&a)).unwrap().into_tensor().unwrap();
        assert_eq!(t.data(), &[0.5, -1.25]);
    }
}
