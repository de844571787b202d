use std::path::Path;

use std::fs::File;
use std::io::BufWriter;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};

use super::{BoundingBox, SampleRecord};
use crate::error::{Error, Result};

/// Reads an 8-bit grayscale PGM; returns `(height, width, values in [0,1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok((h as usize, w as usize, data))
}

/// Writes `values` as a binary (P5) PGM, mapping `[lo, hi]` linearly to
/// `[0, 255]` with clamping.
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f32], lo: f32, hi: f32) -> Result<()> {
    if values.len() != height * width || height == 0 || width == 0 {
        return Err(Error::contract(format!("PGM buffer of {} values does not match {height}x{width}", values.len())));
    }
    if !(hi > lo) {
        return Err(Error::contract(format!("PGM range [{lo}, {hi}] is empty")));
    }
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let out = BufWriter::new(File::create(path)?);
    PnmEncoder::new(out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Builds a record from an external image/mask PGM pair. Mask pixels ≥ 128
/// are foreground; the box is the tight mask bounding box.
pub fn ingest_pgm_pair(image_path: &Path, mask_path: &Path, sample_id: u64) -> Result<SampleRecord> {
    let (h, w, image) = read_pgm(image_path)?;
    let (mh, mw, raw_mask) = read_pgm(mask_path)?;
    if (h, w) != (mh, mw) {
        return Err(Error::contract(format!("image {h}x{w} and mask {mh}x{mw} differ in size")));
    }
    let mask: Vec<u8> = raw_mask.iter().map(|&v| u8::from(v >= 0.5)).collect();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m == 1) {
        let (x, y) = (i % w, i / w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Err(Error::contract(format!("{}: empty mask", mask_path.display())));
    }
    let record = SampleRecord {
        sample_id,
        height: h,
        width: w,
        image,
        mask,
        bbox: BoundingBox { x0: x0 as u32, y0: y0 as u32, x1: x1 as u32, y1: y1 as u32 },
    };
    record.validate()?;
    Ok(record)
}
