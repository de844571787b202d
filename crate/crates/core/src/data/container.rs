use std::fs;
use std::path::Path;

use super::{BoundingBox, SampleRecord};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"ALQD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;
const RECORD_HEADER_LEN: usize = 8 + 4 + 4 + 16;

/// Serialized size of one record: fixed header plus `5·H·W` payload bytes.
pub fn record_size(height: usize, width: usize) -> usize {
    RECORD_HEADER_LEN + 5 * height * width
}

pub fn encode_dataset(records: &[SampleRecord]) -> Result<Vec<u8>> {
    if records.is_empty() {
        return Err(Error::contract("cannot write an empty dataset"));
    }
    let count = u32::try_from(records.len()).map_err(|_| Error::contract("too many records"))?;
    let total = HEADER_LEN + records.iter().map(|r| record_size(r.height, r.width)).sum::<usize>();
    let mut buf = Vec::with_capacity(total);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for r in records {
        r.validate()?;
        buf.extend_from_slice(&r.sample_id.to_le_bytes());
        buf.extend_from_slice(&(r.height as u32).to_le_bytes());
        buf.extend_from_slice(&(r.width as u32).to_le_bytes());
        for v in [r.bbox.x0, r.bbox.y0, r.bbox.x1, r.bbox.y1] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &r.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&r.mask);
    }
    debug_assert_eq!(buf.len(), total);
    Ok(buf)
}

pub fn write_dataset(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let bytes = encode_dataset(records)?;
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<SampleRecord>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic, expected ALQD"));
    }
    let version = c.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = c.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = c.pos as u64;
        let sample_id = c.u64("sample id")?;
        let height = c.u32("height")? as usize;
        let width = c.u32("width")? as usize;
        let mut b = [0u32; 4];
        for v in &mut b {
            *v = c.u32("box")?;
        }
        let n = height
            .checked_mul(width)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::format(start + 8, format!("invalid dimensions {height}x{width}")))?;
        let image: Vec<f32> = c
            .take(n.checked_mul(4).ok_or_else(|| Error::format(start + 8, "dimensions overflow"))?, "image")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let mask = c.take(n, "mask")?.to_vec();
        let record = SampleRecord {
            sample_id,
            height,
            width,
            image,
            mask,
            bbox: BoundingBox { x0: b[0], y0: b[1], x1: b[2], y1: b[3] },
        };
        record.validate().map_err(|e| Error::format(start, e.to_string()))?;
        records.push(record);
    }
    if c.pos != buf.len() {
        return Err(Error::format(c.pos as u64, format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(records)
}

pub fn read_dataset(path: &Path) -> Result<Vec<SampleRecord>> {
    decode_dataset(&fs::read(path)?)
}
