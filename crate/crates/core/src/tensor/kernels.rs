//! Raw loops behind the graph ops. Everything here works on flat slices.

use super::{numel, Real};
use crate::error::{Error, Result};

/// `c += op(a) · op(b)` where `op` transposes when the flag is set.
///
/// Logical shapes are `op(a): m×k`, `op(b): k×n`. A transposed `b` is first
/// copied into row-major `k×n` so the inner loop is a contiguous axpy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let transposed;
    let b_rows: &[T] = if tb {
        let mut buf = vec![T::zero(); k * n];
        for j in 0..n {
            for p in 0..k {
                buf[p * n + j] = b[j * k + p];
            }
        }
        transposed = buf;
        &transposed
    } else {
        b
    };
    if ta {
        for p in 0..k {
            let brow = &b_rows[p * n..(p + 1) * n];
            for i in 0..m {
                let aip = a[p * m + i];
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    } else {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b_rows[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    }
}

/// Output shape under trailing-dimension broadcasting.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For every flat output index, the flat index into an input of shape `src`
/// broadcast to `out`.
pub(crate) fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - src.len();
    let mut strides = vec![0usize; nd];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[i + off] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let total = numel(out);
    let mut idx = vec![0usize; total];
    let mut counter = vec![0usize; nd];
    let mut flat = 0usize;
    for slot in idx.iter_mut() {
        *slot = flat;
        for d in (0..nd).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// How an input maps onto a broadcast output.
pub(crate) enum Bcast {
    Same,
    /// Input equals the trailing block of the output; index = i % len.
    Suffix(usize),
    General(Vec<usize>),
}

pub(crate) fn plan(src: &[usize], out: &[usize]) -> Bcast {
    if src == out {
        return Bcast::Same;
    }
    let trimmed: Vec<usize> = {
        let first = src.iter().position(|&d| d != 1).unwrap_or(src.len());
        src[first..].to_vec()
    };
    if out.ends_with(&trimmed) {
        return Bcast::Suffix(numel(&trimmed));
    }
    Bcast::General(broadcast_index(src, out))
}

impl Bcast {
    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(len) => i % len,
            Bcast::General(idx) => idx[i],
        }
    }

    /// Sums a gradient over the broadcast dimensions back into `len` slots.
    pub(crate) fn reduce<T: Real>(&self, grad: &[T], len: usize) -> Vec<T> {
        match self {
            Bcast::Same => grad.to_vec(),
            Bcast::Suffix(l) => {
                let mut acc = vec![T::zero(); *l];
                for chunk in grad.chunks(*l) {
                    for (a, &g) in acc.iter_mut().zip(chunk) {
                        *a += g;
                    }
                }
                acc
            }
            Bcast::General(idx) => {
                let mut acc = vec![T::zero(); len];
                for (&j, &g) in idx.iter().zip(grad) {
                    acc[j] += g;
                }
                acc
            }
        }
    }
}

/// Permutes the axes of a row-major array.
pub(crate) fn permute<T: Real>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; nd];
    let mut flat = 0usize;
    for _ in 0..data.len() {
        out.push(data[flat]);
        for d in (0..nd).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    (out, out_shape)
}

/// Interpolation taps for 2× bilinear upsampling of a length-`n` axis
/// (half-pixel centers, edge clamped).
pub(crate) fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let w1 = src - i0 as f64;
            (i0.min(n - 1), i1, 1.0 - w1, w1)
        })
        .collect()
}

/// Upsamples the last two axes by 2 (`planes` independent h×w planes).
pub(crate) fn upsample2x<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let th = upsample_taps(h);
    let tw = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut rows = vec![T::zero(); h * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for (o, &(j0, j1, w0, w1)) in tw.iter().enumerate() {
                rows[i * ow + o] = T::lit(w0) * src[i * w + j0] + T::lit(w1) * src[i * w + j1];
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (o, &(i0, i1, w0, w1)) in th.iter().enumerate() {
            for j in 0..ow {
                dst[o * ow + j] = T::lit(w0) * rows[i0 * ow + j] + T::lit(w1) * rows[i1 * ow + j];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`].
pub(crate) fn upsample2x_backward<T: Real>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let th = upsample_taps(h);
    let tw = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    let mut rows = vec![T::zero(); h * ow];
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        rows.iter_mut().for_each(|r| *r = T::zero());
        for (o, &(i0, i1, w0, w1)) in th.iter().enumerate() {
            for j in 0..ow {
                let v = gp[o * ow + j];
                rows[i0 * ow + j] += T::lit(w0) * v;
                rows[i1 * ow + j] += T::lit(w1) * v;
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for (o, &(j0, j1, w0, w1)) in tw.iter().enumerate() {
                let v = rows[i * ow + o];
                dst[i * w + j0] += T::lit(w0) * v;
                dst[i * w + j1] += T::lit(w1) * v;
            }
        }
    }
    out
}
