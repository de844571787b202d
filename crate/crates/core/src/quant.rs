//! Symmetric per-tensor INT8 quantization, straight-through fake
//! quantization, and pooled quantization-error statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::PrecisionPartition;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Largest code magnitude. `-128` is never produced.
pub const QMAX: i8 = 127;

/// Signed 8-bit codes with one positive scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor<T = f32> {
    shape: Vec<usize>,
    values: Vec<i8>,
    scale: T,
}

impl<T: Real> QuantizedTensor<T> {
    /// Validates and wraps raw codes (e.g. read back from a checkpoint).
    pub fn from_parts(shape: &[usize], values: Vec<i8>, scale: T) -> Result<Self> {
        if !(scale > T::zero() && scale.is_finite()) {
            return Err(Error::contract(format!("quantization scale must be positive, got {scale}")));
        }
        if values.iter().any(|&v| v == i8::MIN) {
            return Err(Error::contract("code -128 is outside the symmetric range"));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape("quantized", format!("{shape:?} vs {} codes", values.len())));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            scale,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scale(&self) -> T {
        self.scale
    }
}

/// A scale `s` with `fl(fl(127·s)/127) == s`, so re-quantizing a tensor that
/// is already on the grid reproduces the same scale bit for bit.
fn stable_scale<T: Real>(max_abs: T) -> T {
    let q = T::lit(QMAX as f64);
    let mut s = max_abs / q;
    for _ in 0..4 {
        let next = (s * q) / q;
        if next == s {
            break;
        }
        s = next;
    }
    s
}

pub fn quantize_symmetric<T: Real>(w: &Tensor<T>) -> Result<QuantizedTensor<T>> {
    if !w.is_finite() {
        return Err(Error::NumericFault { op: "quantize_symmetric" });
    }
    let max_abs = w.max_abs();
    let scale = if max_abs == T::zero() {
        T::one()
    } else {
        stable_scale(max_abs)
    };
    // The quotient of two f32 values is never within f64 precision of a
    // half-integer unless it is one, so ties are resolved exactly.
    let (s, lim) = (scale.as_f64(), QMAX as f64);
    let values = w
        .data()
        .iter()
        .map(|&x| (x.as_f64() / s).round_ties_even().clamp(-lim, lim) as i8)
        .collect();
    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        values,
        scale,
    })
}

pub fn dequantize<T: Real>(q: &QuantizedTensor<T>) -> Tensor<T> {
    let data = q.values.iter().map(|&v| T::lit(v as f64) * q.scale).collect();
    Tensor::new(&q.shape, data).expect("quantized tensor shape is valid")
}

/// `dequantize(quantize_symmetric(w))` without the graph.
pub fn fake_quant_tensor<T: Real>(w: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(dequantize(&quantize_symmetric(w)?))
}

/// In-graph fake quantization with an identity straight-through gradient.
pub fn fake_quant<T: Real>(g: &mut Graph<T>, w: Var) -> Result<Var> {
    let value = fake_quant_tensor(g.value(w))?;
    g.straight_through(w, value)
}

/// Pooled statistics of `w - dequantize(quantize(w))` over INT8 weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantErrorStats {
    pub mean: f64,
    pub std: f64,
    pub pearson_r: f64,
    pub n_values: usize,
    pub n_tensors: usize,
    /// `(theoretical, empirical)` quantile pairs against the fitted normal.
    pub qq_points: Vec<(f64, f64)>,
    pub magnitude_bins: Vec<MagnitudeBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_abs_error: f64,
}

const QQ_POINTS: usize = 99;
const MAGNITUDE_BINS: usize = 10;

/// Error statistics for every tensor the partition assigns to INT8.
///
/// When `deployed` holds an entry for a name, that INT8 tensor is used as
/// the quantized value instead of re-quantizing the FP32 weight.
pub fn quant_error_report(
    fp_weights: &BTreeMap<String, Tensor<f32>>,
    partition: &PrecisionPartition,
) -> Result<QuantErrorStats> {
    quant_error_report_against(fp_weights, partition, &BTreeMap::new())
}

pub fn quant_error_report_against(
    fp_weights: &BTreeMap<String, Tensor<f32>>,
    partition: &PrecisionPartition,
    deployed: &BTreeMap<String, QuantizedTensor<f32>>,
) -> Result<QuantErrorStats> {
    if partition.int8_names.is_empty() {
        return Err(Error::contract("quantization error report needs a nonempty INT8 set"));
    }
    let mut fp = Vec::new();
    let mut dq = Vec::new();
    for name in &partition.int8_names {
        let w = fp_weights
            .get(name)
            .ok_or_else(|| Error::contract(format!("INT8 tensor {name} missing from weights")))?;
        let deq = match deployed.get(name) {
            Some(q) => {
                if q.shape() != w.shape() {
                    return Err(Error::shape("quant_error_report", format!("{name}: {:?} vs {:?}", q.shape(), w.shape())));
                }
                dequantize(q)
            }
            None => fake_quant_tensor(w)?,
        };
        fp.extend(w.data().iter().map(|&x| x as f64));
        dq.extend(deq.data().iter().map(|&x| x as f64));
    }
    Ok(error_stats(&fp, &dq, partition.int8_names.len()))
}

fn error_stats(fp: &[f64], dq: &[f64], n_tensors: usize) -> QuantErrorStats {
    let n = fp.len() as f64;
    let err: Vec<f64> = fp.iter().zip(dq).map(|(a, b)| a - b).collect();
    let mean = err.iter().sum::<f64>() / n;
    let var = err.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();

    let mf = fp.iter().sum::<f64>() / n;
    let md = dq.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in fp.iter().zip(dq) {
        sxy += (a - mf) * (b - md);
        sxx += (a - mf).powi(2);
        syy += (b - md).powi(2);
    }
    let pearson_r = if sxx == 0.0 || syy == 0.0 {
        // Constant inputs: identical series are perfectly correlated.
        if fp == dq {
            1.0
        } else {
            0.0
        }
    } else {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    };

    let mut sorted = err.clone();
    sorted.sort_by(f64::total_cmp);
    let qq_points = (1..=QQ_POINTS)
        .map(|k| {
            let p = k as f64 / (QQ_POINTS + 1) as f64;
            let theoretical = if std > 0.0 {
                Normal::new(mean, std).expect("valid normal").inverse_cdf(p)
            } else {
                mean
            };
            (theoretical, empirical_quantile(&sorted, p))
        })
        .collect();

    let max_mag = fp.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let width = if max_mag > 0.0 { max_mag / MAGNITUDE_BINS as f64 } else { 1.0 };
    let mut sums = [0.0f64; MAGNITUDE_BINS];
    let mut counts = [0usize; MAGNITUDE_BINS];
    for (w, e) in fp.iter().zip(&err) {
        let b = ((w.abs() / width) as usize).min(MAGNITUDE_BINS - 1);
        sums[b] += e.abs();
        counts[b] += 1;
    }
    let magnitude_bins = (0..MAGNITUDE_BINS)
        .map(|b| MagnitudeBin {
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            count: counts[b],
            mean_abs_error: if counts[b] > 0 { sums[b] / counts[b] as f64 } else { 0.0 },
        })
        .collect();

    QuantErrorStats {
        mean,
        std,
        pearson_r,
        n_values: fp.len(),
        n_tensors,
        qq_points,
        magnitude_bins,
    }
}

/// Linear-interpolated quantile of sorted data (type-7 definition).
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
