//! Serialized memory cue: one sample's range-coded quantized latent plus a
//! fixed 32-byte header.
//!
//! Layout (little endian): magic "BCLC", version u16, task_id u16,
//! class_id u32, sample_id u32, H u16, W u16, C_lat u16, h u16, w u16,
//! table_checksum u16, bitstream_len u32, then the bitstream bytes.

use super::freq::FrequencyTable;
use super::model::{EntropyModel, LatentGrid};
use super::range::{RangeDecoder, RangeEncoder};
use crate::{Error, Result};
use std::io::{Read, Write};

pub const CUE_MAGIC: &[u8; 4] = b"BCLC";
pub const CUE_VERSION: u16 = 1;
pub const CUE_HEADER_BYTES: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CueHeader {
    pub version: u16,
    pub task_id: u16,
    pub class_id: u32,
    pub sample_id: u32,
    pub h: u16,
    pub w: u16,
    pub c_lat: u16,
    pub lat_h: u16,
    pub lat_w: u16,
    pub table_checksum: u16,
    pub bitstream_len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryCue {
    pub header: CueHeader,
    pub bitstream: Vec<u8>,
}

impl MemoryCue {
    /// Range-encode a quantized latent under the model's frequency tables.
    pub fn encode(
        grid: &LatentGrid,
        model: &EntropyModel,
        task_id: u16,
        class_id: u32,
        sample_id: u32,
    ) -> Result<MemoryCue> {
        let tables = model.frequency_tables();
        if grid.channels != tables.len() {
            return Err(Error::Config(format!(
                "latent has {} channels but model has {}",
                grid.channels,
                tables.len()
            )));
        }
        let r = model.support_r();
        let plane = grid.h * grid.w;
        let mut enc = RangeEncoder::new();
        for (i, &s) in grid.symbols.iter().enumerate() {
            if s < -r || s >= r {
                return Err(Error::Input(format!(
                    "symbol {s} outside model support at index {i}"
                )));
            }
            enc.encode_symbol((s + r) as usize, &tables[i / plane]);
        }
        let bitstream = enc.finish();
        Ok(MemoryCue {
            header: CueHeader {
                version: CUE_VERSION,
                task_id,
                class_id,
                sample_id,
                h: grid.source_hw.0 as u16,
                w: grid.source_hw.1 as u16,
                c_lat: grid.channels as u16,
                lat_h: grid.h as u16,
                lat_w: grid.w as u16,
                table_checksum: model.table_checksum(),
                bitstream_len: bitstream.len() as u32,
            },
            bitstream,
        })
    }

    /// Decode back to the exact latent grid. Fails if the model's table
    /// checksum does not match the one recorded at encode time.
    pub fn decode(&self, model: &EntropyModel) -> Result<LatentGrid> {
        let checksum = model.table_checksum();
        if checksum != self.header.table_checksum {
            return Err(Error::Recall(format!(
                "cue checksum {:#06x} does not match model tables {:#06x} (wrong task context)",
                self.header.table_checksum, checksum
            )));
        }
        self.decode_with_tables(&model.frequency_tables(), model.support_r())
    }

    pub fn decode_with_tables(&self, tables: &[FrequencyTable], r: i32) -> Result<LatentGrid> {
        let (c, lh, lw) = (
            self.header.c_lat as usize,
            self.header.lat_h as usize,
            self.header.lat_w as usize,
        );
        if c != tables.len() {
            return Err(Error::Decode(format!(
                "cue has {} channels but {} tables supplied",
                c,
                tables.len()
            )));
        }
        let plane = lh * lw;
        let n = c * plane;
        let mut symbols = Vec::with_capacity(n);
        if n > 0 {
            let mut dec = RangeDecoder::new(&self.bitstream);
            for i in 0..n {
                let s = dec.decode_symbol(&tables[i / plane])?;
                symbols.push(s as i32 - r);
            }
        }
        Ok(LatentGrid {
            symbols,
            channels: c,
            h: lh,
            w: lw,
            source_hw: (self.header.h as usize, self.header.w as usize),
        })
    }

    /// Exact serialized size in bits, header included.
    pub fn rate_bits(&self) -> u64 {
        8 * self.byte_len()
    }

    pub fn byte_len(&self) -> u64 {
        CUE_HEADER_BYTES + self.bitstream.len() as u64
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let h = &self.header;
        w.write_all(CUE_MAGIC)?;
        w.write_all(&h.version.to_le_bytes())?;
        w.write_all(&h.task_id.to_le_bytes())?;
        w.write_all(&h.class_id.to_le_bytes())?;
        w.write_all(&h.sample_id.to_le_bytes())?;
        w.write_all(&h.h.to_le_bytes())?;
        w.write_all(&h.w.to_le_bytes())?;
        w.write_all(&h.c_lat.to_le_bytes())?;
        w.write_all(&h.lat_h.to_le_bytes())?;
        w.write_all(&h.lat_w.to_le_bytes())?;
        w.write_all(&h.table_checksum.to_le_bytes())?;
        w.write_all(&(self.bitstream.len() as u32).to_le_bytes())?;
        w.write_all(&self.bitstream)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<MemoryCue> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CUE_MAGIC {
            return Err(Error::Decode(format!("bad cue magic {magic:02x?}")));
        }
        let version = read_u16(r)?;
        if version != CUE_VERSION {
            return Err(Error::Decode(format!("unsupported cue version {version}")));
        }
        let header = CueHeader {
            version,
            task_id: read_u16(r)?,
            class_id: read_u32(r)?,
            sample_id: read_u32(r)?,
            h: read_u16(r)?,
            w: read_u16(r)?,
            c_lat: read_u16(r)?,
            lat_h: read_u16(r)?,
            lat_w: read_u16(r)?,
            table_checksum: read_u16(r)?,
            bitstream_len: read_u32(r)?,
        };
        let mut bitstream = vec![0u8; header.bitstream_len as usize];
        r.read_exact(&mut bitstream).map_err(|e| {
            Error::Decode(format!(
                "truncated cue bitstream (expected {} bytes): {e}",
                header.bitstream_len
            ))
        })?;
        Ok(MemoryCue { header, bitstream })
    }
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
    use crate::codec::model::quantize;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_is_exactly_32_bytes() {
        let cue = MemoryCue {
            header: CueHeader {
                version: CUE_VERSION,
                task_id: 1,
                class_id: 2,
                sample_id: 3,
                h: 32,
                w: 32,
                c_lat: 0,
                lat_h: 0,
                lat_w: 0,
                table_checksum: 0,
                bitstream_len: 0,
            },
            bitstream: vec![],
        };
        let mut buf = Vec::new();
        cue.write_to(&mut buf).unwrap();
        assert_eq!(buf.len() as u64, CUE_HEADER_BYTES);
        assert_eq!(cue.rate_bits(), 8 * CUE_HEADER_BYTES);
        assert_eq!(&buf[..4], CUE_MAGIC);
    }

    #[test]
    fn encode_decode_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = EntropyModel::random(4, 8, &mut rng);
        let z = Tensor::from_vec(
            &[4, 3, 3],
            (0..36).map(|_| rng.gen_range(-6.0f32..6.0)).collect(),
        );
        let (grid, _) = quantize(&z, 8, (24, 24));
        let cue = MemoryCue::encode(&grid, &model, 2, 7, 99).unwrap();
        assert_eq!(cue.byte_len() as usize, 32 + cue.bitstream.len());

        let mut buf = Vec::new();
        cue.write_to(&mut buf).unwrap();
        let back = MemoryCue::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, cue);

        let decoded = back.decode(&model).unwrap();
        assert_eq!(decoded, grid);
    }

    #[test]
    fn wrong_model_checksum_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model_a = EntropyModel::random(2, 8, &mut rng);
        let model_b = EntropyModel::random(2, 8, &mut rng);
        let z = Tensor::from_vec(&[2, 2, 2], vec![0.0; 8]);
        let (grid, _) = quantize(&z, 8, (8, 8));
        let cue = MemoryCue::encode(&grid, &model_a, 0, 0, 0).unwrap();
        let err = cue.decode(&model_b).unwrap_err();
        assert!(matches!(err, Error::Recall(_)));
    }
}
