use rand::Rng;

use super::sample::Sample;
use crate::autodiff::kernels::bilinear_forward;
use crate::autodiff::Tensor;
use crate::maskops::BinaryMask;
use crate::{Error, Result};

/// Input scaling applied after mean subtraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub means: [f64; 3],
    /// Multiplier applied after subtracting the means.
    pub scale: f64,
}

impl Normalization {
    pub fn new(means: [f64; 3]) -> Self {
        Normalization { means, scale: 1.0 / 255.0 }
    }
}

/// Side length rounded up to a multiple of 32.
pub fn pad32(n: usize) -> usize {
    n.div_ceil(32) * 32
}

/// Zero-pads a `[c, h, w]` tensor at the bottom and right.
pub fn pad_image(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let mut out = vec![0f32; c * out_h * out_w];
    for ch in 0..c {
        for y in 0..h.min(out_h) {
            let src = &img.data()[(ch * h + y) * w..][..w.min(out_w)];
            out[(ch * out_h + y) * out_w..][..src.len()].copy_from_slice(src);
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("sized")
}

pub fn pad_mask(m: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    BinaryMask::from_fn(out_h, out_w, |y, x| y < m.height() && x < m.width() && m.get(y, x))
}

/// 2x nearest-neighbour upsampling of a mask.
pub fn upsample_mask2(m: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(2 * m.height(), 2 * m.width(), |y, x| m.get(y / 2, x / 2))
}

/// 2x bilinear upsampling, mean subtraction and scaling of the image, 2x
/// nearest upsampling of the masks, then zero padding of both to multiples
/// of 32.
pub fn preprocess(s: &Sample, norm: &Normalization) -> Sample {
    let (h, w) = (s.height(), s.width());
    let up = bilinear_forward(s.image.data(), 3, h, w, 2 * h, 2 * w);
    let plane = 4 * h * w;
    let data = up
        .iter()
        .enumerate()
        .map(|(i, &v)| ((v as f64 - norm.means[i / plane]) * norm.scale) as f32)
        .collect();
    let img = Tensor::new(&[3, 2 * h, 2 * w], data).expect("sized");
    let (ph, pw) = (pad32(2 * h), pad32(2 * w));
    Sample {
        id: s.id.clone(),
        image: pad_image(&img, ph, pw),
        instances: s.instances.iter().map(|m| pad_mask(&upsample_mask2(m), ph, pw)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Output size of the random crop; `None` keeps the full image.
    pub crop_hw: Option<(usize, usize)>,
    /// Rotation angle is uniform in this range, in degrees.
    pub rotation_degrees: (f64, f64),
    /// Gaussian blur sigma is uniform in this range, in pixels.
    pub blur_sigma: (f64, f64),
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    /// Instances smaller than this after augmentation are dropped.
    pub min_area: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_hw: Some((256, 256)),
            rotation_degrees: (-15.0, 15.0),
            blur_sigma: (0.0, 1.5),
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            min_area: 4,
        }
    }
}

impl AugmentConfig {
    /// No-op transform.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_hw: None,
            rotation_degrees: (0.0, 0.0),
            blur_sigma: (0.0, 0.0),
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            min_area: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.flip_h_prob) || !prob(self.flip_v_prob) {
            return Err(Error::Config("flip probabilities must lie in [0, 1]".into()));
        }
        if self.rotation_degrees.0 > self.rotation_degrees.1 || self.blur_sigma.0 > self.blur_sigma.1 || self.blur_sigma.0 < 0.0 {
            return Err(Error::Config("augmentation ranges must be ordered and nonnegative".into()));
        }
        if let Some((h, w)) = self.crop_hw {
            if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
                return Err(Error::Config(format!("crop {h}x{w} must be a positive multiple of 32")));
            }
        }
        Ok(())
    }
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Random crop (after zero padding if the image is smaller), rotation about
/// the image center (bilinear for the image, nearest for masks, zero fill),
/// Gaussian blur of the image, and horizontal/vertical flips. The same
/// geometric transform is applied to the image and every mask.
pub fn augment(s: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let mut image = s.image.clone();
    let mut masks = s.instances.clone();

    if let Some((ch, cw)) = cfg.crop_hw {
        let (h, w) = (image.shape()[1].max(ch), image.shape()[2].max(cw));
        image = pad_image(&image, h, w);
        masks = masks.iter().map(|m| pad_mask(m, h, w)).collect();
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        image = crop_image(&image, y0, x0, ch, cw);
        masks = masks
            .iter()
            .map(|m| BinaryMask::from_fn(ch, cw, |y, x| m.get(y + y0, x + x0)))
            .collect();
    }

    let angle = sample_range(rng, cfg.rotation_degrees);
    if angle != 0.0 {
        image = rotate_image(&image, angle);
        masks = masks.iter().map(|m| rotate_mask(m, angle)).collect();
    }

    let sigma = sample_range(rng, cfg.blur_sigma);
    if sigma > 1e-3 {
        image = gaussian_blur(&image, sigma);
    }

    if rng.random_bool(cfg.flip_h_prob) {
        image = flip_image(&image, true);
        masks = masks.iter().map(BinaryMask::flip_horizontal).collect();
    }
    if rng.random_bool(cfg.flip_v_prob) {
        image = flip_image(&image, false);
        masks = masks.iter().map(BinaryMask::flip_vertical).collect();
    }

    masks.retain(|m| m.count() >= cfg.min_area.max(1));
    Sample {
        id: s.id.clone(),
        image,
        instances: masks,
    }
}

fn crop_image(img: &Tensor<f32>, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in 0..ch {
            out.extend_from_slice(&img.data()[(k * h + y0 + y) * w + x0..][..cw]);
        }
    }
    Tensor::new(&[c, ch, cw], out).expect("sized")
}

/// Horizontal flip mirrors columns, vertical flip mirrors rows.
pub fn flip_image(img: &Tensor<f32>, horizontal: bool) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = vec![0f32; c * h * w];
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                out[(k * h + y) * w + x] = img.data()[(k * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("sized")
}

/// Source coordinate (in pixel-center units) of output pixel `(y, x)` for
/// a counter-clockwise rotation by `deg` about the image center.
fn rotation_source(h: usize, w: usize, deg: f64) -> impl Fn(usize, usize) -> (f64, f64) {
    let (s, c) = deg.to_radians().sin_cos();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    move |y, x| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let sx = c * dx - s * dy + cx - 0.5;
        let sy = s * dx + c * dy + cy - 0.5;
        (sy, sx)
    }
}

pub fn rotate_image(img: &Tensor<f32>, deg: f64) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = rotation_source(h, w, deg);
    let mut out = vec![0f32; c * h * w];
    let at = |k: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img.data()[(k * h + y as usize) * w + x as usize] as f64
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for k in 0..c {
                let top = at(k, y0, x0) * (1.0 - fx) + at(k, y0, x0 + 1) * fx;
                let bot = at(k, y0 + 1, x0) * (1.0 - fx) + at(k, y0 + 1, x0 + 1) * fx;
                out[(k * h + y) * w + x] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("sized")
}

pub fn rotate_mask(m: &BinaryMask, deg: f64) -> BinaryMask {
    let (h, w) = (m.height(), m.width());
    let src = rotation_source(h, w, deg);
    BinaryMask::from_fn(h, w, |y, x| {
        let (sy, sx) = src(y, x);
        let (ry, rx) = (sy.round(), sx.round());
        ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w && m.get(ry as usize, rx as usize)
    })
}

/// Separable Gaussian blur with a `ceil(3 sigma)` radius and clamped edges.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut tmp = vec![0f64; c * h * w];
    for p in 0..c * h {
        let row = &img.data()[p * w..][..w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let sx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[sx] as f64;
            }
            tmp[p * w + x] = acc;
        }
    }
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(ch * h + sy) * w + x];
                }
                out[(ch * h + y) * w + x] = acc as f32;
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("sized")
}
