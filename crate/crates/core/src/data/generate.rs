use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BoundingBox, SampleRecord};
use crate::error::{Error, Result};

/// Geometry draws per sample before giving up.
pub const MAX_ATTEMPTS: usize = 8;

const MIN_AREA: f64 = 0.08;
const MAX_AREA: f64 = 0.6;
const NOISE_STD: f64 = 0.05;
const MAX_BOX_JITTER: u32 = 3;

/// Ellipse with a sinusoidally perturbed boundary, in pixel units.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    rot: f64,
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rot.sin_cos();
        let u = (dx * c + dy * s) / self.ax;
        let v = (-dx * s + dy * c) / self.ay;
        let rho = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        rho <= 1.0 + self.amp * (self.freq * theta + self.phase).sin()
    }

    fn random_wobble<R: Rng>(mut self, rng: &mut R) -> Self {
        self.amp = rng.random_range(0.0..0.08);
        self.freq = rng.random_range(2..=4) as f64;
        self.phase = rng.random_range(0.0..2.0 * PI);
        self
    }
}

fn rasterize(h: usize, w: usize, blobs: &[Blob]) -> Vec<u8> {
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if blobs.iter().any(|b| b.contains(px, py)) {
                mask[y * w + x] = 1;
            }
        }
    }
    mask
}

/// Mask must be nonempty, clear of the image border and within the area
/// bounds.
fn mask_ok(mask: &[u8], h: usize, w: usize) -> bool {
    let area = mask.iter().filter(|&&m| m == 1).count() as f64 / (h * w) as f64;
    if !(MIN_AREA..=MAX_AREA).contains(&area) {
        return false;
    }
    let border = (0..w).flat_map(|x| [(x, 0), (x, h - 1)]).chain((0..h).flat_map(|y| [(0, y), (w - 1, y)]));
    border.into_iter().all(|(x, y)| mask[y * w + x] == 0)
}

fn jittered_box<R: Rng>(mask: &[u8], h: usize, w: usize, rng: &mut R) -> BoundingBox {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] == 1 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    let mut j = || rng.random_range(0..=MAX_BOX_JITTER) as usize;
    BoundingBox {
        x0: x0.saturating_sub(j()) as u32,
        y0: y0.saturating_sub(j()) as u32,
        x1: (x1 + j()).min(w - 1) as u32,
        y1: (y1 + j()).min(h - 1) as u32,
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 {
        return Err(Error::contract(format!("sample size must be at least 32x32, got {h}x{w}")));
    }
    Ok(())
}

/// Two-lobed "lung field" sample, fully determined by `seed`.
pub fn generate_sample(seed: u64, h: usize, w: usize) -> Result<SampleRecord> {
    check_size(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fh, fw) = (h as f64, w as f64);
    for _ in 0..MAX_ATTEMPTS {
        let lobes: Vec<Blob> = [0.30, 0.70]
            .iter()
            .map(|&side| {
                let mirror = if side < 0.5 { 1.0 } else { -1.0 };
                Blob {
                    cx: fw * (side + rng.random_range(-0.04..0.04)),
                    cy: fh * (0.5 + rng.random_range(-0.05..0.05)),
                    ax: fw * rng.random_range(0.10..0.16),
                    ay: fh * rng.random_range(0.20..0.30),
                    rot: mirror * rng.random_range(-0.10..0.25),
                    amp: 0.0,
                    freq: 0.0,
                    phase: 0.0,
                }
                .random_wobble(&mut rng)
            })
            .collect();
        let mask = rasterize(h, w, &lobes);
        if !mask_ok(&mask, h, w) {
            continue;
        }
        let noise = Normal::new(0.0, NOISE_STD).expect("valid noise");
        let mut image = Vec::with_capacity(h * w);
        for y in 0..h {
            let ramp = y as f64 / (h - 1) as f64;
            for x in 0..w {
                let base = if mask[y * w + x] == 1 { 0.75 } else { 0.35 };
                let v = 0.8 * base + 0.2 * ramp + noise.sample(&mut rng);
                image.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        let bbox = jittered_box(&mask, h, w, &mut rng);
        return Ok(SampleRecord {
            sample_id: seed,
            height: h,
            width: w,
            image,
            mask,
            bbox,
        });
    }
    Err(Error::contract(format!("seed {seed}: no valid geometry after {MAX_ATTEMPTS} attempts")))
}

/// Generic sample with one or two foreground components under a single box,
/// random contrast polarity, an optional distractor object and random
/// illumination. Used to pretrain the base model before adaptation to the
/// lung-field task.
pub fn generate_source_sample(seed: u64, h: usize, w: usize) -> Result<SampleRecord> {
    check_size(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_b45e);
    let (fh, fw) = (h as f64, w as f64);
    for _ in 0..MAX_ATTEMPTS {
        let parts = if rng.random_bool(0.5) { 1 } else { 2 };
        let lo = if parts == 1 { 0.12 } else { 0.08 };
        let hi = if parts == 1 { 0.30 } else { 0.22 };
        let objects: Vec<Blob> = (0..parts)
            .map(|_| {
                let ax = fw * rng.random_range(lo..hi);
                let ay = fh * rng.random_range(lo..hi);
                let r = ax.max(ay);
                Blob {
                    cx: rng.random_range(r + 1.0..fw - r - 1.0),
                    cy: rng.random_range(r + 1.0..fh - r - 1.0),
                    ax,
                    ay,
                    rot: rng.random_range(0.0..PI),
                    amp: 0.0,
                    freq: 0.0,
                    phase: 0.0,
                }
                .random_wobble(&mut rng)
            })
            .collect();
        let mask = rasterize(h, w, &objects);
        if !mask_ok(&mask, h, w) {
            continue;
        }
        let bbox = jittered_box(&mask, h, w, &mut rng);

        let bg: f64 = rng.random_range(0.2..0.8);
        let delta: f64 = rng.random_range(0.2..0.4);
        let fg = if rng.random_bool(0.5) { bg + delta } else { bg - delta }.clamp(0.0, 1.0);
        let distractor = if rng.random_bool(0.5) {
            let d = Blob {
                cx: rng.random_range(0.0..fw),
                cy: rng.random_range(0.0..fh),
                ax: fw * rng.random_range(0.05..0.12),
                ay: fh * rng.random_range(0.05..0.12),
                rot: rng.random_range(0.0..PI),
                amp: 0.0,
                freq: 0.0,
                phase: 0.0,
            };
            Some((d, rng.random_range(0.0..1.0)))
        } else {
            None
        };
        let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
        let noise = Normal::new(0.0, rng.random_range(0.03..0.07)).expect("valid noise");
        let mut image = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = if mask[y * w + x] == 1 { fg } else { bg };
                if let Some((d, level)) = distractor {
                    if mask[y * w + x] == 0 && !bbox.contains(x, y) && d.contains(px, py) {
                        v = level;
                    }
                }
                v += gx * (px / fw - 0.5) + gy * (py / fh - 0.5) + noise.sample(&mut rng);
                image.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        return Ok(SampleRecord {
            sample_id: seed,
            height: h,
            width: w,
            image,
            mask,
            bbox,
        });
    }
    Err(Error::contract(format!("seed {seed}: no valid source geometry after {MAX_ATTEMPTS} attempts")))
}

/// `count` samples with ids `base_seed·1_000_003 + i`-derived seeds.
///
/// Sample ids are `0..count`; each record's pixels come from its own
/// derived seed so records can be regenerated independently.
pub fn generate_dataset(base_seed: u64, count: usize, size: usize) -> Result<Vec<SampleRecord>> {
    (0..count as u64)
        .map(|i| {
            let mut r = generate_sample(derive_seed(base_seed, i), size, size)?;
            r.sample_id = i;
            Ok(r)
        })
        .collect()
}

pub(crate) fn derive_seed(base: u64, i: u64) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(i)
}
