//! Flat binary tensor format for dataset interchange and standalone codec
//! inspection.
//!
//! Layout (little endian): magic "BCLT", version u16, dtype u8
//! (0 = u8, 1 = f32, 2 = u32), ndim u8, dims u32 each, then the payload
//! row-major.

use crate::{Error, Result};
use std::fs;
use std::path::Path;

pub const FLAT_MAGIC: &[u8; 4] = b"BCLT";
pub const FLAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlatDtype {
    U8 = 0,
    F32 = 1,
    U32 = 2,
}

impl FlatDtype {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(FlatDtype::U8),
            1 => Some(FlatDtype::F32),
            2 => Some(FlatDtype::U32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            FlatDtype::U8 => 1,
            FlatDtype::F32 | FlatDtype::U32 => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlatTensor {
    pub dtype: FlatDtype,
    pub dims: Vec<usize>,
    payload: Vec<u8>,
}

impl FlatTensor {
    pub fn from_u8(dims: &[usize], data: &[u8]) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        FlatTensor {
            dtype: FlatDtype::U8,
            dims: dims.to_vec(),
            payload: data.to_vec(),
        }
    }

    pub fn from_f32(dims: &[usize], data: &[f32]) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        FlatTensor {
            dtype: FlatDtype::F32,
            dims: dims.to_vec(),
            payload: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_u32(dims: &[usize], data: &[u32]) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        FlatTensor {
            dtype: FlatDtype::U32,
            dims: dims.to_vec(),
            payload: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn data_u8(&self) -> &[u8] {
        assert_eq!(self.dtype, FlatDtype::U8);
        &self.payload
    }

    pub fn data_f32(&self) -> Vec<f32> {
        assert_eq!(self.dtype, FlatDtype::F32);
        self.payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    pub fn data_u32(&self) -> Vec<u32> {
        assert_eq!(self.dtype, FlatDtype::U32);
        self.payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

pub fn write_flat_tensor(path: &Path, t: &FlatTensor) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * t.dims.len() + t.payload.len());
    out.extend_from_slice(FLAT_MAGIC);
    out.extend_from_slice(&FLAT_VERSION.to_le_bytes());
    out.push(t.dtype as u8);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.payload);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_flat_tensor(path: &Path) -> Result<FlatTensor> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != FLAT_MAGIC {
        return Err(Error::Ingestion {
            offset: 0,
            msg: "bad flat-tensor magic".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FLAT_VERSION {
        return Err(Error::Ingestion {
            offset: 4,
            msg: format!("unsupported flat-tensor version {version}"),
        });
    }
    let dtype = FlatDtype::from_u8(bytes[6]).ok_or_else(|| Error::Ingestion {
        offset: 6,
        msg: format!("unknown dtype {}", bytes[6]),
    })?;
    let ndim = bytes[7] as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut off = 8;
    for _ in 0..ndim {
        if bytes.len() < off + 4 {
            return Err(Error::Ingestion {
                offset: off as u64,
                msg: "file ends inside dims".into(),
            });
        }
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    let expected = dims.iter().product::<usize>() * dtype.width();
    if bytes.len() - off != expected {
        return Err(Error::Ingestion {
            offset: off as u64,
            msg: format!(
                "payload of {} bytes does not match dims {:?} ({} expected)",
                bytes.len() - off,
                dims,
                expected
            ),
        });
    }
    Ok(FlatTensor {
        dtype,
        dims,
        payload: bytes[off..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bclt");
        let t = FlatTensor::from_f32(&[2, 3], &[1.0, -2.0, 0.5, 3.25, 0.0, -1e9]);
        write_flat_tensor(&p, &t).unwrap();
        let first = std::fs::read(&p).unwrap();
        let back = read_flat_tensor(&p).unwrap();
        assert_eq!(back.data_f32(), t.data_f32());
        write_flat_tensor(&p, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }
}
