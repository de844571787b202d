//! Two-stage adapter fine-tuning with mixed-precision quantization-aware
//! training for a small promptable segmentation model.
//!
//! Stage 1 trains SVD-parameterized low-rank adapters on the encoder QKV
//! projections together with the mask decoder and prompt encoder, pruning
//! adapter rank by gradient-sensitivity importance. Stage 2 freezes the rank
//! masks, fake-quantizes the non-QKV weights to symmetric per-tensor INT8 and
//! tunes only the adapter singular values.

pub mod adapters;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
