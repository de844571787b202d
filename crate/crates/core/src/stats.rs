//! Wilcoxon signed-rank test for paired samples.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest effective sample size handled by the exact null distribution.
pub const EXACT_MAX_N: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
    /// `min(W⁺, W⁻)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided.
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their
/// positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Paired two-sided signed-rank test on `x − y`.
///
/// Zero differences are dropped. For at most [`EXACT_MAX_N`] remaining
/// pairs the p-value comes from the exact sign-flip distribution; beyond
/// that a tie-corrected normal approximation with continuity correction is
/// used.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::shape("wilcoxon_signed_rank", format!("{} vs {} observations", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::contract("signed-rank test needs at least one pair"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NumericFault { op: "wilcoxon_signed_rank" });
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|&d| d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n_effective: 0,
            w: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            method: WilcoxonMethod::Exact,
        });
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v < 0.0).map(|(_, r)| r).sum();
    let w = w_plus.min(w_minus);

    let (p, method) = if n <= EXACT_MAX_N {
        // Doubled ranks are integers even with ties.
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let limit = (2.0 * w).round() as u64;
        let has_ties = doubled.iter().any(|&r| r % 2 == 1) || {
            let mut s = doubled.clone();
            s.sort_unstable();
            s.windows(2).any(|p| p[0] == p[1])
        };
        let tail = if has_ties {
            enumerate_tail(&doubled, limit)
        } else {
            dp_tail(&doubled, limit)
        };
        ((2.0 * tail).min(1.0), WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = ((w - mean + 0.5) / var.sqrt()).min(0.0);
        let phi = Normal::standard().cdf(z);
        ((2.0 * phi).clamp(f64::MIN_POSITIVE, 1.0), WilcoxonMethod::NormalApproximation)
    };
    Ok(WilcoxonResult {
        n_effective: n,
        w,
        w_plus,
        w_minus,
        p_value: p,
        method,
    })
}

/// `P(T ≤ limit)` for `T` the sum of a uniformly random subset of
/// `weights`, by subset-sum counting.
fn dp_tail(weights: &[u64], limit: u64) -> f64 {
    let total: u64 = weights.iter().sum();
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &wt in weights {
        let wt = wt as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0.0 {
                counts[s + wt] += counts[s];
            }
        }
        reach += wt;
    }
    let hits: f64 = counts[..=(limit as usize).min(total as usize)].iter().sum();
    hits / 2f64.powi(weights.len() as i32)
}

/// Same as [`dp_tail`] by visiting all `2ⁿ` sign patterns.
fn enumerate_tail(weights: &[u64], limit: u64) -> f64 {
    let n = weights.len();
    let hits = (0u64..1 << n)
        .filter(|&bits| {
            let s: u64 = (0..n).filter(|&i| bits >> i & 1 == 1).map(|i| weights[i]).sum();
            s <= limit
        })
        .count();
    hits as f64 / (1u64 << n) as f64
}
