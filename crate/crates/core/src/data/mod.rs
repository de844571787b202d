//! Synthetic lung-field segmentation samples, the `ALQD` dataset container
//! and the train/val/test split.
//!
//! All randomness comes from `ChaCha8Rng` (the ChaCha stream cipher with 8
//! rounds, a counter-based generator) seeded with `seed_from_u64`.

mod container;
mod generate;
mod pgm;
mod split;

pub use container::{decode_dataset, encode_dataset, read_dataset, record_size, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub(crate) use generate::derive_seed;
pub use generate::{generate_dataset, generate_sample, generate_source_sample, MAX_ATTEMPTS};
pub use pgm::{ingest_pgm_pair, read_pgm, write_pgm};
pub use split::{split_dataset, DatasetSplit, Split};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inclusive pixel box `(x0, y0, x1, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0 as usize..=self.x1 as usize).contains(&x) && (self.y0 as usize..=self.y1 as usize).contains(&y)
    }

    pub fn as_f64(&self) -> [f64; 4] {
        [self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64]
    }
}

/// One image / mask / box-prompt triple.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major `{0, 1}`.
    pub mask: Vec<u8>,
    pub bbox: BoundingBox,
}

impl SampleRecord {
    /// Checks the record invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.image.len() != n || self.mask.len() != n {
            return Err(Error::contract(format!("sample {}: buffer sizes do not match {}x{}", self.sample_id, self.height, self.width)));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::contract(format!("sample {}: mask is not binary", self.sample_id)));
        }
        if !self.mask.contains(&1) {
            return Err(Error::contract(format!("sample {}: empty mask", self.sample_id)));
        }
        let b = self.bbox;
        if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 as usize >= self.width || b.y1 as usize >= self.height {
            return Err(Error::contract(format!("sample {}: box {b:?} out of bounds", self.sample_id)));
        }
        for y in 0..self.height {
            for x in 0..self.width {
                if self.mask[y * self.width + x] == 1 && !b.contains(x, y) {
                    return Err(Error::contract(format!("sample {}: mask pixel ({x},{y}) outside box", self.sample_id)));
                }
            }
        }
        Ok(())
    }

    pub fn mask_area_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m == 1).count() as f64 / self.mask.len() as f64
    }

    pub fn image_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.height, self.width], self.image.clone()).expect("record shape")
    }

    pub fn mask_tensor(&self) -> Tensor<f32> {
        let data = self.mask.iter().map(|&m| m as f32).collect();
        Tensor::new(&[self.height, self.width], data).expect("record shape")
    }
}
