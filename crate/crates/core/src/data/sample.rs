use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use crate::autodiff::Tensor;
use crate::maskops::BinaryMask;
use crate::{Error, Result};

/// One image and its per-nucleus masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, h, w]`; raw 0-255 after loading, normalized after preprocessing.
    pub image: Tensor<f32>,
    pub instances: Vec<BinaryMask>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// The image as a one-element batch `[1, 3, h, w]`.
    pub fn batch(&self) -> Tensor<f32> {
        let s = self.image.shape();
        self.image.clone().reshape(&[1, s[0], s[1], s[2]]).expect("rank 3 image")
    }
}

fn pngs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::data(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::data(path, e.to_string()))
}

/// RGB planes of an image; gray is replicated and alpha dropped.
pub fn image_to_tensor(img: &DynamicImage) -> Tensor<f32> {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32;
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized")
}

/// Nonzero pixels of any channel (alpha ignored).
pub fn image_to_mask(img: &DynamicImage) -> BinaryMask {
    let rgb = img.to_rgb16();
    let w = rgb.width() as usize;
    BinaryMask::from_fn(rgb.height() as usize, w, |y, x| rgb.get_pixel(x as u32, y as u32).0.iter().any(|&v| v > 0))
}

/// Loads `<dir>/images/<id>.png` and every `<dir>/masks/*.png`, where `id`
/// is the directory name.
///
/// An image without mask files loads with no instances (and a warning);
/// a mask whose size differs from the image is an error naming the file.
/// Masks are read in file-name order.
pub fn load_sample(dir: &Path) -> Result<Sample> {
    let id = dir
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::data(dir, "sample directory has no usable name"))?
        .to_string();
    let img_path = dir.join("images").join(format!("{id}.png"));
    let img_path = if img_path.is_file() {
        img_path
    } else {
        let imgs = pngs_in(&dir.join("images")).unwrap_or_default();
        match imgs.as_slice() {
            [one] => one.clone(),
            _ => return Err(Error::data(&img_path, "image file not found")),
        }
    };
    let image = image_to_tensor(&open(&img_path)?);
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mask_dir = dir.join("masks");
    let mask_files = if mask_dir.is_dir() { pngs_in(&mask_dir)? } else { Vec::new() };
    if mask_files.is_empty() {
        log::warn!("{}: no mask files, loading with zero instances", dir.display());
    }
    let mut instances = Vec::with_capacity(mask_files.len());
    for p in mask_files {
        let m = image_to_mask(&open(&p)?);
        if m.height() != h || m.width() != w {
            return Err(Error::data(
                &p,
                format!("mask is {}x{} but the image is {h}x{w}", m.height(), m.width()),
            ));
        }
        if m.is_empty() {
            log::warn!("{}: empty mask skipped", p.display());
            continue;
        }
        instances.push(m);
    }
    Ok(Sample { id, image, instances })
}

/// Sample directories under `root` (those with an `images/` subdirectory),
/// sorted by name.
pub fn discover(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::data(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("images").is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Id of every sample under `root`, sorted.
pub fn discover_ids(root: &Path) -> Result<Vec<String>> {
    Ok(discover(root)?
        .iter()
        .filter_map(|p| p.file_name().and_then(|s| s.to_str()).map(str::to_string))
        .collect())
}

/// Global per-channel mean over every pixel of `samples`.
pub fn channel_means(samples: &[Sample]) -> [f64; 3] {
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for s in samples {
        let hw = s.height() * s.width();
        for (c, acc) in sum.iter_mut().enumerate() {
            *acc += s.image.data()[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        n += hw;
    }
    if n == 0 {
        return [0.0; 3];
    }
    sum.map(|v| v / n as f64)
}

/// Writes a mask as an 8-bit {0, 255} PNG.
pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::data(path, e.to_string()))
}
