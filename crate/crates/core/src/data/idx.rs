//! IDX (MNIST-style) image and label files: big-endian magic + dims, then
//! raw u8 payload. Images use magic 0x00000803 (u8, 3 dims), labels
//! 0x00000801 (u8, 1 dim). Parse errors carry the byte offset.

use crate::{Error, Result};
use std::fs;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Ingestion {
            offset: bytes.len() as u64,
            msg: format!("file ends inside the u32 at offset {offset}"),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Returns (pixels, n, h, w).
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Ingestion {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(&bytes, 4)? as usize;
    let h = be_u32(&bytes, 8)? as usize;
    let w = be_u32(&bytes, 12)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(Error::Ingestion {
            offset: bytes.len().min(expected) as u64,
            msg: format!(
                "image payload length {} does not match header {n}x{h}x{w} (expected {expected})",
                bytes.len()
            ),
        });
    }
    Ok((bytes[16..].to_vec(), n, h, w))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Ingestion {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(&bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(Error::Ingestion {
            offset: bytes.len().min(expected) as u64,
            msg: format!(
                "label payload length {} does not match header count {n}",
                bytes.len()
            ),
        });
    }
    Ok(bytes[8..].to_vec())
}

pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, h: usize, w: usize) -> Result<()> {
    assert_eq!(pixels.len(), n * h * w);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.idx");
        let pixels: Vec<u8> = (0..2 * 4 * 5).map(|i| i as u8).collect();
        write_idx_images(&p, &pixels, 2, 4, 5).unwrap();
        let (back, n, h, w) = read_idx_images(&p).unwrap();
        assert_eq!((n, h, w), (2, 4, 5));
        assert_eq!(back, pixels);
    }

    #[test]
    fn length_mismatch_is_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&5u32.to_be_bytes());
        bytes.extend_from_slice(&[0u8; 10]); // should be 40
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_idx_images(&p),
            Err(Error::Ingestion { .. })
        ));
    }
}
