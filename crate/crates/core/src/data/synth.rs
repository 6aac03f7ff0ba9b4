use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::sample::{save_mask_png, Sample};
use crate::autodiff::Tensor;
use crate::maskops::BinaryMask;
use crate::{Error, Result};

pub const SYNTH_SIZE: usize = 64;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Id of the `i`-th synthetic sample.
pub fn synth_id(i: usize) -> String {
    format!("synth_{i:04}")
}

/// One 64x64 synthetic image with 3 to 5 disjoint elliptical nuclei
/// (semi-axes 5 to 10 px) on a noisy dark background.
pub fn synth_sample(seed: u64, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64);
    let n = SYNTH_SIZE;
    let count = rng.random_range(3..=5);
    let mut shapes: Vec<Ellipse> = Vec::new();
    let mut attempts = 0;
    while shapes.len() < count && attempts < 10_000 {
        attempts += 1;
        let a = rng.random_range(5.0..=10.0);
        let b = rng.random_range(5.0..=10.0);
        let r = f64::max(a, b);
        let lo = r + 1.0;
        let hi = n as f64 - r - 1.0;
        let e = Ellipse {
            cy: rng.random_range(lo..hi),
            cx: rng.random_range(lo..hi),
            a,
            b,
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        let clear = shapes.iter().all(|o| {
            let d = ((o.cx - e.cx).powi(2) + (o.cy - e.cy).powi(2)).sqrt();
            d > o.a.max(o.b) + r + 2.0
        });
        if clear {
            shapes.push(e);
        }
    }
    let instances: Vec<BinaryMask> = shapes
        .iter()
        .map(|e| BinaryMask::from_fn(n, n, |y, x| e.contains(y as f64 + 0.5, x as f64 + 0.5)))
        .collect();
    let tint = [rng.random_range(0.8..1.0), rng.random_range(0.6..0.9), rng.random_range(0.8..1.0)];
    let noise = Normal::new(0.0, 8.0).expect("valid sigma");
    let brightness: Vec<f64> = shapes.iter().map(|_| rng.random_range(150.0..220.0)).collect();
    let mut data = vec![0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let base = instances
                .iter()
                .zip(&brightness)
                .find(|(m, _)| m.get(y, x))
                .map_or(30.0, |(_, &b)| b);
            let v = base + noise.sample(&mut rng);
            for (c, t) in tint.iter().enumerate() {
                data[(c * n + y) * n + x] = (v * t).round().clamp(0.0, 255.0) as f32;
            }
        }
    }
    Sample {
        id: synth_id(index),
        image: Tensor::new(&[3, n, n], data).expect("sized"),
        instances,
    }
}

/// Writes `sample` in the `<root>/<id>/images/<id>.png` +
/// `<root>/<id>/masks/<id>_<k>.png` layout.
pub fn write_sample(sample: &Sample, root: &Path) -> Result<()> {
    let dir = root.join(&sample.id);
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let (h, w) = (sample.height(), sample.width());
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| sample.image.data()[(c * h + y as usize) * w + x as usize].round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    let p = dir.join("images").join(format!("{}.png", sample.id));
    img.save(&p).map_err(|e| Error::data(&p, e.to_string()))?;
    for (k, m) in sample.instances.iter().enumerate() {
        save_mask_png(m, &dir.join("masks").join(format!("{}_{k:02}.png", sample.id)))?;
    }
    Ok(())
}

/// Generates `n` synthetic samples under `out_dir`; returns their ids.
pub fn make_synth(n: usize, out_dir: &Path, seed: u64) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::InvalidArgument("make-synth needs n >= 1".into()));
    }
    fs::create_dir_all(out_dir)?;
    (0..n)
        .map(|i| {
            let s = synth_sample(seed, i);
            write_sample(&s, out_dir)?;
            Ok(s.id)
        })
        .collect()
}
