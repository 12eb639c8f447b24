//! Parameter checkpoint format: a flat list of
//! (name, shape, row-major little-endian f32 values) records, used by both
//! model checkpoints and task memory bundles.
//!
//! Layout: magic "BCCK", version u16, record count u32, then per record
//! name length u16 + UTF-8 bytes, ndim u8, dims u32 each, values f32.

use crate::{Error, Result};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BCCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_checkpoint<W: Write>(w: &mut W, records: &[CheckpointRecord]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for rec in records {
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[rec.shape.len() as u8])?;
        let numel: usize = rec.shape.iter().product();
        if numel != rec.values.len() {
            return Err(Error::Input(format!(
                "record {} shape {:?} does not match {} values",
                rec.name,
                rec.shape,
                rec.values.len()
            )));
        }
        for &d in &rec.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &rec.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<CheckpointRecord>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Decode(format!(
            "bad checkpoint magic {magic:02x?}"
        )));
    }
    let version = read_u16(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Decode(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Decode("checkpoint record name is not UTF-8".into()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            values.push(f32::from_le_bytes(buf));
        }
        records.push(CheckpointRecord { name, shape, values });
    }
    Ok(records)
}

/// Serialized byte size of a record set without writing it out.
pub fn checkpoint_byte_len(records: &[CheckpointRecord]) -> u64 {
    let mut n = 4 + 2 + 4u64;
    for rec in records {
        n += 2 + rec.name.len() as u64 + 1 + 4 * rec.shape.len() as u64 + 4 * rec.values.len() as u64;
    }
    n
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_size_accounting() {
        let records = vec![
            CheckpointRecord {
                name: "net.w1".into(),
                shape: vec![2, 3],
                values: vec![1.0, -2.0, 3.5, 0.0, 1e-8, -1e8],
            },
            CheckpointRecord {
                name: "net.b1".into(),
                shape: vec![2],
                values: vec![0.5, -0.5],
            },
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &records).unwrap();
        assert_eq!(buf.len() as u64, checkpoint_byte_len(&records));
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00\x00\x00";
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
