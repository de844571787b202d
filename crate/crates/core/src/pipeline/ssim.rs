use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::metrics::{delta_ssim, ssim_map};

/// SSIM of probability maps against ground truth for a model and a
/// reference, with their signed difference.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimSample {
    pub sample_id: u64,
    pub height: usize,
    pub width: usize,
    pub map: Vec<f64>,
    pub reference_map: Vec<f64>,
    pub delta: Vec<f64>,
    pub mean: f64,
    pub reference_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimComparison {
    pub n_samples: usize,
    pub mean_ssim: f64,
    pub reference_mean_ssim: f64,
    pub mean_delta: f64,
}

pub fn ssim_comparison(
    records: &[SampleRecord],
    probs: &[Vec<f32>],
    reference_probs: &[Vec<f32>],
) -> Result<(SsimComparison, Vec<SsimSample>)> {
    if records.len() != probs.len() || records.len() != reference_probs.len() {
        return Err(Error::contract("probability maps do not match the record count"));
    }
    if records.is_empty() {
        return Err(Error::contract("no samples to compare"));
    }
    let mut samples = Vec::with_capacity(records.len());
    for ((rec, p), r) in records.iter().zip(probs).zip(reference_probs) {
        let (h, w) = (rec.height, rec.width);
        let gt: Vec<f64> = rec.mask.iter().map(|&m| f64::from(m)).collect();
        let p: Vec<f64> = p.iter().map(|&v| f64::from(v)).collect();
        let r: Vec<f64> = r.iter().map(|&v| f64::from(v)).collect();
        let (map, mean) = ssim_map(&p, &gt, h, w)?;
        let (reference_map, reference_mean) = ssim_map(&r, &gt, h, w)?;
        let delta = delta_ssim(&map, &reference_map)?;
        samples.push(SsimSample {
            sample_id: rec.sample_id,
            height: h,
            width: w,
            map,
            reference_map,
            delta,
            mean,
            reference_mean,
        });
    }
    let n = samples.len() as f64;
    let mean_ssim = samples.iter().map(|s| s.mean).sum::<f64>() / n;
    let reference_mean_ssim = samples.iter().map(|s| s.reference_mean).sum::<f64>() / n;
    Ok((
        SsimComparison {
            n_samples: samples.len(),
            mean_ssim,
            reference_mean_ssim,
            mean_delta: mean_ssim - reference_mean_ssim,
        },
        samples,
    ))
}
