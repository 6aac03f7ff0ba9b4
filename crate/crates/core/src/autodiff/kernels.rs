//! Forward and backward kernels on raw row-major slices.
//!
//! Parallel kernels split work by output row only; every output element is
//! reduced in a fixed order by a single thread, so results do not depend on
//! the thread count.

use rayon::prelude::*;

use super::tensor::Real;
use crate::{Error, Result};

/// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_MIN_WORK: usize = 1 << 15;

fn for_rows<T: Real>(buf: &mut [T], row: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if row == 0 {
        return;
    }
    if work >= PAR_MIN_WORK {
        buf.par_chunks_mut(row).enumerate().for_each(|(i, r)| f(i, r));
    } else {
        buf.chunks_mut(row).enumerate().for_each(|(i, r)| f(i, r));
    }
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, w], &[f, wc, kh, kw]) = (x, wt) else {
            return Err(Error::Shape(format!("conv2d: input {x:?}, weight {wt:?}")));
        };
        if wc != c || stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape(format!(
                "conv2d: input {x:?} incompatible with weight {wt:?} (stride {stride})"
            )));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < kh || pw < kw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Shape(format!(
                "conv2d: {h}x{w} input with pad {pad}, kernel {kh}x{kw}, stride {stride} gives a non-integral output"
            )));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + y as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if x < 0 || x >= g.w as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + y as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], wt: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.n * g.f * p];
    let mut cols = vec![T::zero(); k * p];
    let img_len = g.c * g.h * g.w;
    for n in 0..g.n {
        im2col(&x[n * img_len..][..img_len], g, &mut cols);
        let cols = &cols;
        for_rows(&mut out[n * g.f * p..][..g.f * p], p, g.f * k * p, |fi, row| {
            row.fill(b[fi]);
            let wrow = &wt[fi * k..][..k];
            for (ki, &wv) in wrow.iter().enumerate() {
                axpy(row, wv, &cols[ki * p..][..p]);
            }
        });
    }
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Real>(x: &[T], wt: &[T], g: &ConvGeom, dout: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (k, p) = (g.k(), g.p());
    let img_len = g.c * g.h * g.w;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); wt.len()];
    let mut db = vec![T::zero(); g.f];
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); k * p];
    for n in 0..g.n {
        let dimg = &dout[n * g.f * p..][..g.f * p];
        im2col(&x[n * img_len..][..img_len], g, &mut cols);
        let cols_ref = &cols;
        for_rows(&mut dw, k, g.f * k * p, |fi, row| {
            let drow = &dimg[fi * p..][..p];
            for (ki, slot) in row.iter_mut().enumerate() {
                *slot += dot(drow, &cols_ref[ki * p..][..p]);
            }
        });
        for (fi, d) in db.iter_mut().enumerate() {
            *d += dimg[fi * p..][..p].iter().copied().sum::<T>();
        }
        for_rows(&mut dcols, p, g.f * k * p, |ki, row| {
            row.fill(T::zero());
            for fi in 0..g.f {
                axpy(row, wt[fi * k + ki], &dimg[fi * p..][..p]);
            }
        });
        col2im(&dcols, g, &mut dx[n * img_len..][..img_len]);
    }
    (dx, dw, db)
}

/// Geometry of a transposed convolution without padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvTGeom {
    pub fn new(x: &[usize], wt: &[usize], stride: usize) -> Result<Self> {
        let (&[n, c, h, w], &[wc, f, k, k2]) = (x, wt) else {
            return Err(Error::Shape(format!("conv_transpose2d: input {x:?}, weight {wt:?}")));
        };
        if wc != c || k != k2 || k == 0 || stride == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input {x:?} incompatible with weight {wt:?}"
            )));
        }
        Ok(ConvTGeom {
            n,
            c,
            h,
            w,
            f,
            k,
            stride,
            oh: (h - 1) * stride + k,
            ow: (w - 1) * stride + k,
        })
    }
}

pub fn conv_transpose2d_forward<T: Real>(x: &[T], wt: &[T], b: &[T], g: &ConvTGeom) -> Vec<T> {
    let p = g.h * g.w;
    let jn = g.f * g.k * g.k;
    let out_len = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.f * out_len];
    let mut cols = vec![T::zero(); jn * p];
    for n in 0..g.n {
        let ximg = &x[n * g.c * p..][..g.c * p];
        for_rows(&mut cols, p, g.c * jn * p, |j, row| {
            row.fill(T::zero());
            for c in 0..g.c {
                axpy(row, wt[c * jn + j], &ximg[c * p..][..p]);
            }
        });
        let oimg = &mut out[n * g.f * out_len..][..g.f * out_len];
        for f in 0..g.f {
            oimg[f * out_len..][..out_len].fill(b[f]);
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = &cols[((f * g.k + ky) * g.k + kx) * p..][..p];
                    for iy in 0..g.h {
                        let oy = iy * g.stride + ky;
                        for ix in 0..g.w {
                            oimg[f * out_len + oy * g.ow + ix * g.stride + kx] += row[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    wt: &[T],
    g: &ConvTGeom,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = g.h * g.w;
    let jn = g.f * g.k * g.k;
    let out_len = g.oh * g.ow;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); wt.len()];
    let mut db = vec![T::zero(); g.f];
    let mut dcols = vec![T::zero(); jn * p];
    for n in 0..g.n {
        let dimg = &dout[n * g.f * out_len..][..g.f * out_len];
        for f in 0..g.f {
            db[f] += dimg[f * out_len..][..out_len].iter().copied().sum::<T>();
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = &mut dcols[((f * g.k + ky) * g.k + kx) * p..][..p];
                    for iy in 0..g.h {
                        let oy = iy * g.stride + ky;
                        for ix in 0..g.w {
                            row[iy * g.w + ix] = dimg[f * out_len + oy * g.ow + ix * g.stride + kx];
                        }
                    }
                }
            }
        }
        let ximg = &x[n * g.c * p..][..g.c * p];
        let dcols_ref = &dcols;
        for_rows(&mut dx[n * g.c * p..][..g.c * p], p, g.c * jn * p, |c, row| {
            for j in 0..jn {
                axpy(row, wt[c * jn + j], &dcols_ref[j * p..][..p]);
            }
        });
        for_rows(&mut dw, jn, g.c * jn * p, |c, row| {
            let xr = &ximg[c * p..][..p];
            for (j, slot) in row.iter_mut().enumerate() {
                *slot += dot(xr, &dcols_ref[j * p..][..p]);
            }
        });
    }
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2. Returns the output and the flat input
/// index each output element was taken from (first maximum wins).
pub fn max_pool2x2_forward<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Bilinear taps `(i0, i1, frac)` for resizing an axis from `inp` to `out`
/// samples with half-pixel centers (no corner alignment).
pub fn resize_taps(inp: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            if i0 >= inp - 1 {
                (inp - 1, inp - 1, 0.0)
            } else {
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

pub fn bilinear_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for plane in 0..planes {
        let src = &x[plane * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            let fy = T::of(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::of(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        let dst = &mut dx[plane * h * w..][..h * w];
        let g = &dout[plane * oh * ow..][..oh * ow];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let v = g[i * ow + j];
                dst[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += v * (T::one() - fy) * fx;
                dst[y1 * w + x0] += v * fy * (T::one() - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// Separable ROI-Align weights along one axis.
///
/// The ROI spans `[a, b)` in feature coordinates (image coordinates divided
/// by the stride, never rounded). Each of the `out` bins averages `samples`
/// regularly spaced interior points; each point is read bilinearly from the
/// grid whose cell `i` is centered at `i + 0.5`. A point outside `[0, size]`
/// reads as zero; a point inside but beyond the outermost cell centers takes
/// the edge value. Returns, per bin, the `(index, weight)` pairs.
pub fn roi_axis_weights(a: f64, b: f64, out: usize, samples: usize, size: usize) -> Vec<Vec<(usize, f64)>> {
    let bin = (b - a) / out as f64;
    let inv = 1.0 / samples as f64;
    let last = size.saturating_sub(1) as f64;
    (0..out)
        .map(|i| {
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(2 * samples);
            for s in 0..samples {
                let pos = a + (i as f64 + (s as f64 + 0.5) * inv) * bin;
                if size == 0 || !(0.0..=size as f64).contains(&pos) {
                    continue;
                }
                let u = (pos - 0.5).clamp(0.0, last);
                let u0 = u.floor();
                let frac = u - u0;
                for (idx, wgt) in [(u0, 1.0 - frac), (u0 + 1.0, frac)] {
                    if wgt == 0.0 {
                        continue;
                    }
                    let idx = idx as usize;
                    match taps.iter_mut().find(|(k, _)| *k == idx) {
                        Some((_, acc)) => *acc += wgt * inv,
                        None => taps.push((idx, wgt * inv)),
                    }
                }
            }
            taps
        })
        .collect()
}

/// ROI-Align of a single ROI over one `[c, h, w]` feature plane stack.
pub fn roi_align_forward<T: Real>(
    feat: &[T],
    c: usize,
    h: usize,
    w: usize,
    wy: &[Vec<(usize, f64)>],
    wx: &[Vec<(usize, f64)>],
) -> Vec<T> {
    let (ph, pw) = (wy.len(), wx.len());
    let mut out = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        let plane = &feat[ch * h * w..][..h * w];
        for (i, ty) in wy.iter().enumerate() {
            for (j, tx) in wx.iter().enumerate() {
                let mut acc = T::zero();
                for &(yi, a) in ty {
                    let row = &plane[yi * w..][..w];
                    let mut r = T::zero();
                    for &(xi, b) in tx {
                        r += row[xi] * T::of(b);
                    }
                    acc += r * T::of(a);
                }
                out[(ch * ph + i) * pw + j] = acc;
            }
        }
    }
    out
}

pub fn roi_align_backward<T: Real>(
    dout: &[T],
    dfeat: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    wy: &[Vec<(usize, f64)>],
    wx: &[Vec<(usize, f64)>],
) {
    let (ph, pw) = (wy.len(), wx.len());
    for ch in 0..c {
        let plane = &mut dfeat[ch * h * w..][..h * w];
        for (i, ty) in wy.iter().enumerate() {
            for (j, tx) in wx.iter().enumerate() {
                let g = dout[(ch * ph + i) * pw + j];
                for &(yi, a) in ty {
                    let ga = g * T::of(a);
                    for &(xi, b) in tx {
                        plane[yi * w + xi] += ga * T::of(b);
                    }
                }
            }
        }
    }
}
