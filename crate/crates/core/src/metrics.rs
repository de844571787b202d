//! Training losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-6;
/// Default NSD tolerance in pixels.
pub const DEFAULT_NSD_TAU: f64 = 2.0;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

fn check_binary<T: Real>(target: &Tensor<T>) -> Result<()> {
    if target.data().iter().any(|&t| t != T::zero() && t != T::one()) {
        return Err(Error::contract("segmentation target must be binary"));
    }
    Ok(())
}

/// Mean BCE plus soft Dice loss. `logits` and `target` are `[B, H, W]` (or
/// `[H, W]` for one sample); the Dice term is averaged over samples.
pub fn qat_loss<T: Real>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    check_binary(target)?;
    let bce = g.bce_with_logits(logits, target)?;
    let bce = g.mean(bce)?;

    let shape = g.shape(logits).to_vec();
    let (logits, target) = if shape.len() == 2 {
        let l = g.reshape(logits, &[1, shape[0], shape[1]])?;
        (l, target.reshape(&[1, shape[0], shape[1]])?)
    } else {
        (logits, target.clone())
    };
    let p = g.sigmoid(logits)?;
    let t = g.constant(target);
    let pt = g.mul(p, t)?;
    let inter = g.sum_last(pt, 2)?;
    let sp = g.sum_last(p, 2)?;
    let st = g.sum_last(t, 2)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_EPS)?;
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, DICE_EPS)?;
    let ratio = g.div(num, den)?;
    let mean_ratio = g.mean(ratio)?;
    let dice_loss = g.scale(mean_ratio, -1.0)?;
    let dice_loss = g.add_scalar(dice_loss, 1.0)?;
    g.add(bce, dice_loss)
}

/// [`qat_loss`] plus `lambda_ortho · Σ ortho_penalty(P, Q)` over the given
/// adapter factor pairs.
pub fn stage1_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    target: &Tensor<T>,
    adapters: &[(Var, Var)],
    lambda_ortho: f64,
) -> Result<Var> {
    let base = qat_loss(g, logits, target)?;
    if lambda_ortho == 0.0 || adapters.is_empty() {
        return Ok(base);
    }
    let mut total: Option<Var> = None;
    for &(p, q) in adapters {
        let pen = crate::adapters::ortho_penalty(g, p, q)?;
        total = Some(match total {
            Some(t) => g.add(t, pen)?,
            None => pen,
        });
    }
    let ortho = g.scale(total.expect("nonempty"), lambda_ortho)?;
    g.add(base, ortho)
}

/// Hard Dice and IoU of two binary masks; both empty counts as a perfect
/// match.
pub fn dice_iou(pred: &[u8], target: &[u8]) -> Result<(f64, f64)> {
    if pred.len() != target.len() {
        return Err(Error::shape("dice_iou", format!("{} vs {}", pred.len(), target.len())));
    }
    let (mut inter, mut sp, mut st) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p != 0, t != 0);
        inter += usize::from(p && t);
        sp += usize::from(p);
        st += usize::from(t);
    }
    if sp + st == 0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * inter as f64 / (sp + st) as f64;
    let iou = inter as f64 / (sp + st - inter) as f64;
    Ok((dice, iou))
}

/// Mask pixels with a 4-neighbour that is background or off-image.
pub fn boundary(mask: &[u8], h: usize, w: usize) -> Vec<bool> {
    let at = |x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask[y as usize * w + x as usize] != 0
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(x, y) && !(at(x - 1, y) && at(x + 1, y) && at(x, y - 1) && at(x, y + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// One-dimensional squared-distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut s = meet(q, v[k]);
        // z[0] is -inf, so k never underflows.
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `features`. Pixels are infinitely far when there are none.
pub fn squared_distance_transform(features: &[bool], h: usize, w: usize) -> Vec<f64> {
    const FAR: f64 = 1e20;
    let mut grid: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid.iter().map(|&d| if d >= FAR { f64::INFINITY } else { d }).collect()
}

/// Normalized surface distance at tolerance `tau`: the share of both masks'
/// boundary pixels that lie within `tau` of the other boundary, pooled over
/// the two directions.
pub fn nsd(pred: &[u8], target: &[u8], h: usize, w: usize, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::contract(format!("NSD tolerance must be nonnegative, got {tau}")));
    }
    if pred.len() != h * w || target.len() != h * w {
        return Err(Error::shape("nsd", format!("{} and {} pixels for {h}x{w}", pred.len(), target.len())));
    }
    let (bp, bt) = (boundary(pred, h, w), boundary(target, h, w));
    let (np, nt) = (bp.iter().filter(|&&b| b).count(), bt.iter().filter(|&&b| b).count());
    match (np, nt) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let tau2 = tau * tau;
    let close = |from: &[bool], to_dt: &[f64]| from.iter().zip(to_dt).filter(|(&b, &d)| b && d <= tau2).count();
    let dt_p = squared_distance_transform(&bp, h, w);
    let dt_t = squared_distance_transform(&bt, h, w);
    Ok((close(&bp, &dt_t) + close(&bt, &dt_p)) as f64 / (np + nt) as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let raw: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric reflection of `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = win
                .iter()
                .enumerate()
                .map(|(k, &wt)| wt * img[y * w + reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = win
                .iter()
                .enumerate()
                .map(|(k, &wt)| wt * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Local SSIM map (11×11 Gaussian window, σ = 1.5, dynamic range 1) and its
/// mean. Borders use symmetric reflection.
pub fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, f64)> {
    if a.len() != h * w || b.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape("ssim_map", format!("{} and {} pixels for {h}x{w}", a.len(), b.len())));
    }
    let win = gaussian_window();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (ma, mb) = (blur(a, h, w, &win), blur(b, h, w, &win));
    let (saa, sbb, sab) = (blur(&aa, h, w, &win), blur(&bb, h, w, &win), blur(&ab, h, w, &win));
    let map: Vec<f64> = (0..h * w)
        .map(|i| {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            (num / den).clamp(-1.0, 1.0)
        })
        .collect();
    let mean = map.iter().sum::<f64>() / map.len() as f64;
    Ok((map, mean))
}

/// Elementwise `map_qat − map_base`.
pub fn delta_ssim(map_qat: &[f64], map_base: &[f64]) -> Result<Vec<f64>> {
    if map_qat.len() != map_base.len() {
        return Err(Error::shape("delta_ssim", format!("{} vs {}", map_qat.len(), map_base.len())));
    }
    Ok(map_qat.iter().zip(map_base).map(|(q, b)| q - b).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: u64,
    pub dice: f64,
    pub iou: f64,
    pub nsd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dice: MeanStd,
    pub iou: MeanStd,
    pub nsd: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
}

/// Metric selector used by reports and the signed-rank test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dice,
    Iou,
    Nsd,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(Metric::Dice),
            "iou" => Ok(Metric::Iou),
            "nsd" => Ok(Metric::Nsd),
            other => Err(Error::contract(format!("unknown metric '{other}'"))),
        }
    }
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Self {
        let col = |f: fn(&SampleMetrics) -> f64| -> Vec<f64> { per_sample.iter().map(f).collect() };
        let aggregate = Aggregate {
            dice: MeanStd::of(&col(|s| s.dice)),
            iou: MeanStd::of(&col(|s| s.iou)),
            nsd: MeanStd::of(&col(|s| s.nsd)),
        };
        Self { per_sample, aggregate }
    }

    pub fn values(&self, metric: Metric) -> Vec<f64> {
        self.per_sample
            .iter()
            .map(|s| match metric {
                Metric::Dice => s.dice,
                Metric::Iou => s.iou,
                Metric::Nsd => s.nsd,
            })
            .collect()
    }
}
