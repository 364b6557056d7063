//! "DMMD" dataset files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "DMMD" | version u16 | height u32 | width u32 | task u8 | seed u64 | entries u32
//! per entry: labels u32 | input f32 × H·W | labels × ceil(H·W / 8) bytes, LSB-first bits
//! ```

use std::fs;
use std::path::Path;

use super::{DmmDataset, DmmEntry, Task};
use crate::error::{DmmError, Result};
use crate::image::{Image, Mask};
use crate::io::ByteReader;

pub const DATASET_MAGIC: &[u8; 4] = b"DMMD";
pub const DATASET_VERSION: u16 = 1;

pub fn write_dataset(ds: &DmmDataset) -> Vec<u8> {
    let pixels = ds.pixels();
    let mut out = Vec::with_capacity(32 + ds.len() * (4 + pixels * 4 + 4 * pixels.div_ceil(8)));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.height() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.width() as u32).to_le_bytes());
    out.push(ds.task().tag());
    out.extend_from_slice(&ds.seed().to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    for e in ds.entries() {
        out.extend_from_slice(&(e.labels.len() as u32).to_le_bytes());
        for v in e.input.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for label in &e.labels {
            out.extend(pack_bits(label.data()));
        }
    }
    out
}

pub fn read_dataset(bytes: &[u8]) -> Result<DmmDataset> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(DmmError::Format {
            offset: 0,
            detail: "bad magic, not a DMMD dataset".into(),
        });
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(DmmError::UnsupportedVersion {
            what: "dataset",
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let tag_at = r.offset();
    let task = Task::from_tag(r.u8()?).ok_or_else(|| DmmError::Format {
        offset: tag_at,
        detail: "unknown task tag".into(),
    })?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    if height == 0 || width == 0 {
        return Err(DmmError::Format {
            offset: 6,
            detail: "zero image dimension".into(),
        });
    }
    let pixels = height * width;
    let packed = pixels.div_ceil(8);
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let at = r.offset();
        let n_labels = r.u32()? as usize;
        if n_labels == 0 {
            return Err(DmmError::Format {
                offset: at,
                detail: "entry without labels".into(),
            });
        }
        let input: Vec<f32> = r
            .take(pixels * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            let bits = unpack_bits(r.take(packed)?, pixels);
            labels.push(Mask::new(height, width, bits)?);
        }
        entries.push(DmmEntry {
            input: Image::new(height, width, input)?,
            labels,
        });
    }
    if r.remaining() != 0 {
        return Err(DmmError::Format {
            offset: r.offset(),
            detail: format!("{} trailing bytes", r.remaining()),
        });
    }
    DmmDataset::new(height, width, task, seed, entries)
}

pub fn save_dataset(ds: &DmmDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_dataset(ds)).map_err(|e| DmmError::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DmmDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DmmError::io(path, e))?;
    read_dataset(&bytes)
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|chunk| chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b << i)))
        .collect()
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect()
}
