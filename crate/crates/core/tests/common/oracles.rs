use alqt_core::adapters::AdapterState;
use alqt_core::quant::{dequantize, fake_quant_tensor, quantize_symmetric};
use alqt_core::stats::average_ranks;
use alqt_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-sided p by walking all 2ⁿ sign patterns over the average ranks of
/// the nonzero |differences|.
pub fn enumeration_p(x: &[f64], y: &[f64]) -> f64 {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w = w_plus.min(total - w_plus);
    let mut hits = 0u64;
    for bits in 0u64..(1 << n) {
        let t: f64 = (0..n).filter(|i| bits & (1 << i) != 0).map(|i| ranks[i]).sum();
        if t <= w + 1e-9 {
            hits += 1;
        }
    }
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}

/// Paired samples with a random shift; half the draws use coarse
/// differences so ties and zeros occur.
pub fn paired(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let coarse = rng.random_bool(0.5);
    let shift = rng.random_range(-1.0..1.0);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
    let y = x
        .iter()
        .map(|&v| {
            let e: f64 = rng.random_range(-2.0..2.0) + shift;
            if coarse {
                v + (e * 2.0).round() / 2.0
            } else {
                v + e
            }
        })
        .collect();
    (x, y)
}

/// Up to 64 components over 1..=8 layers, with integer scores half the time.
pub fn random_layers(rng: &mut ChaCha8Rng) -> Vec<AdapterState<f32>> {
    let layers = rng.random_range(1..=8);
    let r_max = rng.random_range(1..=64 / layers);
    let ties = rng.random_bool(0.5);
    (0..layers)
        .map(|l| {
            let mut a = AdapterState::init(&format!("layer{l}"), 4, 4, r_max, rng);
            let scores: Vec<f64> = (0..r_max)
                .map(|_| if ties { rng.random_range(0..4) as f64 } else { rng.random::<f64>() })
                .collect();
            a.set_importance(&scores).unwrap();
            a
        })
        .collect()
}

pub fn scores_of(adapters: &[AdapterState<f32>]) -> Vec<(usize, usize, f64)> {
    adapters
        .iter()
        .enumerate()
        .flat_map(|(l, a)| a.importance().iter().enumerate().map(move |(i, &s)| (l, i, s)))
        .collect()
}

/// Component `(l, i)` survives iff fewer than `budget` components beat it:
/// higher score, or equal score at a smaller `(layer, index)`.
pub fn dominance_oracle(scores: &[(usize, usize, f64)], budget: usize) -> Vec<(usize, usize)> {
    scores
        .iter()
        .filter(|&&(l, i, s)| {
            let beaten_by = scores
                .iter()
                .filter(|&&(l2, i2, s2)| s2 > s || (s2 == s && (l2, i2) < (l, i)))
                .count();
            beaten_by < budget
        })
        .map(|&(l, i, _)| (l, i))
        .collect()
}

pub fn kept(adapters: &[AdapterState<f32>]) -> Vec<(usize, usize)> {
    adapters
        .iter()
        .enumerate()
        .flat_map(|(l, a)| a.mask().iter().enumerate().filter(|(_, &m)| m).map(move |(i, _)| (l, i)))
        .collect()
}

/// 1..=300 Gaussian values with a standard deviation spanning six decades.
pub fn seeded_tensor(seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=300);
    let std = 10f64.powf(rng.random_range(-4.0..2.0));
    Tensor::randn(&[n], std, &mut rng)
}

pub type Check = std::result::Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// `|w − code·scale| ≤ scale/2` in exact arithmetic, and dequantization
/// returns the correctly rounded `code·scale`.
pub fn round_trip_within_half_step(seed: u64) -> Check {
    let w = seeded_tensor(seed);
    let q = quantize_symmetric(&w).map_err(|e| e.to_string())?;
    let back = dequantize(&q);
    let (s, half) = (q.scale() as f64, q.scale() as f64 / 2.0);
    for ((&a, &c), &b) in w.data().iter().zip(q.values()).zip(back.data()) {
        let exact = c as f64 * s;
        ensure((a as f64 - exact).abs() <= half, || format!("{a} vs {c}·{s}"))?;
        ensure(b == exact as f32, || format!("{b} is not the f32 nearest {exact}"))?;
    }
    ensure(q.values().iter().all(|&v| v != i8::MIN), || "code -128 emitted".into())
}

pub fn negation_symmetric(seed: u64) -> Check {
    let w = seeded_tensor(seed);
    let neg = w.map(|v| -v);
    let a = quantize_symmetric(&w).map_err(|e| e.to_string())?;
    let b = quantize_symmetric(&neg).map_err(|e| e.to_string())?;
    ensure(a.scale() == b.scale(), || "scales differ".into())?;
    ensure(a.values().iter().zip(b.values()).all(|(x, y)| *x == -*y), || "codes not negated".into())
}

/// Scaling by `2^k` leaves codes unchanged and multiplies the scale exactly.
pub fn power_of_two_scale_invariant(seed: u64, k: i32) -> Check {
    let w = seeded_tensor(seed);
    let c = 2f32.powi(k);
    let scaled = w.map(|v| v * c);
    let a = quantize_symmetric(&w).map_err(|e| e.to_string())?;
    let b = quantize_symmetric(&scaled).map_err(|e| e.to_string())?;
    ensure(a.values() == b.values(), || format!("codes differ for c = 2^{k}"))?;
    ensure(a.scale() * c == b.scale(), || "scale not multiplied by c".into())
}

/// For general `c > 0` the scale follows `c` to f32 precision and codes can
/// only move by one step at a rounding tie.
pub fn general_scale_invariant(seed: u64, c: f32) -> Check {
    let w = seeded_tensor(seed);
    let scaled = w.map(|v| v * c);
    let a = quantize_symmetric(&w).map_err(|e| e.to_string())?;
    let b = quantize_symmetric(&scaled).map_err(|e| e.to_string())?;
    ensure(((b.scale() / a.scale()) / c - 1.0).abs() < 1e-5, || "scale ratio off".into())?;
    for ((&x, &y), &v) in a.values().iter().zip(b.values()).zip(w.data()) {
        if x != y {
            let frac = (v / a.scale()).abs().fract();
            ensure((x - y).abs() == 1 && (frac - 0.5).abs() < 1e-3, || format!("code {x} vs {y} off a tie"))?;
        }
    }
    Ok(())
}

pub fn fake_quant_idempotent(seed: u64) -> Check {
    let w = seeded_tensor(seed);
    let once = fake_quant_tensor(&w).map_err(|e| e.to_string())?;
    let twice = fake_quant_tensor(&once).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&once) == bits(&twice), || "second application moved values".into())?;
    let q1 = quantize_symmetric(&w).map_err(|e| e.to_string())?;
    let q2 = quantize_symmetric(&once).map_err(|e| e.to_string())?;
    ensure(q1 == q2, || "requantizing changed codes or scale".into())
}
