use image::RgbImage;

use crate::autodiff::Tensor;
use crate::maskops::BinaryMask;

/// Fixed palette cycled over instances.
const PALETTE: [[u8; 3]; 8] = [
    [255, 64, 64],
    [64, 255, 64],
    [64, 160, 255],
    [255, 220, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 140, 0],
    [180, 120, 255],
];

/// Converts a raw `[3, h, w]` 0-255 image to RGB8.
pub fn to_rgb(image: &Tensor<f32>) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| d[(c * h + y as usize) * w + x as usize].round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// True for mask pixels with a 4-neighbour outside the mask or the image.
pub fn contour(m: &BinaryMask) -> BinaryMask {
    let (h, w) = (m.height(), m.width());
    BinaryMask::from_fn(h, w, |y, x| {
        m.get(y, x)
            && (y == 0 || x == 0 || y + 1 == h || x + 1 == w || !m.get(y - 1, x) || !m.get(y + 1, x) || !m.get(y, x - 1) || !m.get(y, x + 1))
    })
}

/// The input image with each instance's contour drawn in its own colour.
/// With no masks the result equals the input.
pub fn draw_overlay(image: &Tensor<f32>, masks: &[BinaryMask]) -> RgbImage {
    let mut out = to_rgb(image);
    for (k, m) in masks.iter().enumerate() {
        let c = contour(m);
        for y in 0..c.height() {
            for x in 0..c.width() {
                if c.get(y, x) {
                    out.put_pixel(x as u32, y as u32, image::Rgb(PALETTE[k % PALETTE.len()]));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contour_of_a_square_is_its_ring() {
        let m = BinaryMask::rect(8, 8, 2, 2, 6, 6);
        let c = contour(&m);
        assert_eq!(c.count(), 12);
        assert!(!c.get(3, 3) && c.get(2, 3));
    }

    #[test]
    fn empty_overlay_is_the_input() {
        let img = Tensor::new(&[3, 4, 5], (0..60).map(|v| v as f32).collect()).unwrap();
        let o = draw_overlay(&img, &[]);
        assert_eq!(o.dimensions(), (5, 4));
        assert_eq!(o.get_pixel(1, 2).0, [11.0 as u8, 31, 51]);
    }
}
