//! Binary instance masks and the operations the detector needs on them.
//!
//! Masks are stored row-major. The run-length form follows the Data Science
//! Bowl convention: pixels are numbered column by column, top to bottom,
//! starting at 1, and each run is a `(start, length)` pair.

use std::fmt::Write as _;

use crate::geometry::BoxXYXY;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    /// Wraps a row-major 0/1 grid. Any value other than 0 or 1 is rejected.
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x) as u8);
            }
        }
        BinaryMask { height, width, bits }
    }

    /// Mask of an integer rectangle `[x1, x2) x [y1, y2)`.
    pub fn rect(height: usize, width: usize, x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        Self::from_fn(height, width, |y, x| x >= x1 && x < x2 && y >= y1 && y < y2)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// Tight pixel bounding box, or `None` for an empty mask.
    pub fn bbox(&self) -> Option<BoxXYXY> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            let row = &self.bits[y * self.width..(y + 1) * self.width];
            if let Some(first) = row.iter().position(|&b| b != 0) {
                let last = row.iter().rposition(|&b| b != 0).unwrap();
                x1 = x1.min(first);
                x2 = x2.max(last + 1);
                y1 = y1.min(y);
                y2 = y + 1;
            }
        }
        (x1 != usize::MAX).then(|| BoxXYXY {
            x1: x1 as f64,
            y1: y1 as f64,
            x2: x2 as f64,
            y2: y2 as f64,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x))
    }
}

/// Run-length encoded mask with column-major, 1-indexed runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<(u64, u64)>,
}

impl RleMask {
    /// Checks ordering, bounds and maximality of the runs.
    pub fn validate(&self) -> Result<()> {
        let total = (self.height * self.width) as u64;
        let mut prev_end = 0u64; // last covered position (1-indexed), 0 = none
        for (k, &(start, len)) in self.runs.iter().enumerate() {
            if start == 0 || len == 0 {
                return Err(Error::Rle(format!("run {k} ({start} {len}) is empty or 0-indexed")));
            }
            let end = start
                .checked_add(len - 1)
                .ok_or_else(|| Error::Rle(format!("run {k} overflows")))?;
            if end > total {
                return Err(Error::Rle(format!(
                    "run {k} ({start} {len}) exceeds {total} pixels"
                )));
            }
            if k > 0 && start <= prev_end {
                return Err(Error::Rle(format!("run {k} ({start} {len}) overlaps its predecessor")));
            }
            if k > 0 && start == prev_end + 1 {
                return Err(Error::Rle(format!("run {k} ({start} {len}) is adjacent to its predecessor")));
            }
            prev_end = end;
        }
        Ok(())
    }

    /// Space-separated `start length` pairs, as in a submission line.
    pub fn encoded_pixels(&self) -> String {
        let mut s = String::new();
        for (k, (start, len)) in self.runs.iter().enumerate() {
            if k > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{start} {len}");
        }
        s
    }
}

pub fn rle_encode(m: &BinaryMask) -> RleMask {
    let (h, w) = (m.height, m.width);
    let mut runs = Vec::new();
    let mut current: Option<(u64, u64)> = None;
    for x in 0..w {
        for y in 0..h {
            let pos = (x * h + y + 1) as u64;
            if m.get(y, x) {
                match current.as_mut() {
                    Some((_, len)) => *len += 1,
                    None => current = Some((pos, 1)),
                }
            } else if let Some(run) = current.take() {
                runs.push(run);
            }
        }
    }
    runs.extend(current);
    RleMask {
        height: h,
        width: w,
        runs,
    }
}

pub fn rle_decode(r: &RleMask) -> Result<BinaryMask> {
    r.validate()?;
    let mut m = BinaryMask::zeros(r.height, r.width);
    for &(start, len) in &r.runs {
        for p in (start - 1)..(start - 1 + len) {
            let p = p as usize;
            let (x, y) = (p / r.height, p % r.height);
            m.set(y, x, true);
        }
    }
    Ok(m)
}

/// `|a & b| / |a | b|`, defined as 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!(
            "mask_iou: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.bits.iter().zip(&b.bits) {
        inter += (p & q) as usize;
        union += (p | q) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Merged label image: 0 is background, `k` is instance `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl InstanceLabelMap {
    pub fn num_instances(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Support of label `k` as a binary mask.
    pub fn instance(&self, k: u32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| (l == k) as u8).collect(),
        }
    }
}

/// Merges per-instance masks into one label image.
///
/// Mask `i` becomes label `i + 1`. A pixel claimed by several masks goes to
/// the one with the smallest area (lowest index on equal area). Instances
/// that end up with no pixels are dropped and labels are compacted so the
/// label set stays `{0..K}`.
pub fn merge_masks(masks: &[BinaryMask], height: usize, width: usize) -> Result<InstanceLabelMap> {
    if let Some(m) = masks.iter().find(|m| m.height != height || m.width != width) {
        return Err(Error::Shape(format!(
            "merge_masks: mask {}x{} in a {height}x{width} map",
            m.height, m.width
        )));
    }
    let areas: Vec<usize> = masks.iter().map(BinaryMask::count).collect();
    let mut labels = vec![0u32; height * width];
    for (p, slot) in labels.iter_mut().enumerate() {
        let winner = masks
            .iter()
            .enumerate()
            .filter(|(_, m)| m.bits[p] != 0)
            .min_by_key(|(i, _)| (areas[*i], *i));
        if let Some((i, _)) = winner {
            *slot = i as u32 + 1;
        }
    }
    let mut present = vec![false; masks.len() + 1];
    for &l in &labels {
        present[l as usize] = true;
    }
    let mut remap = vec![0u32; masks.len() + 1];
    let mut next = 0;
    for (k, slot) in remap.iter_mut().enumerate().skip(1) {
        if present[k] {
            next += 1;
            *slot = next;
        }
    }
    for l in &mut labels {
        *l = remap[*l as usize];
    }
    Ok(InstanceLabelMap {
        height,
        width,
        labels,
    })
}

/// Resamples the instance mask inside `roi` onto an `m x m` grid.
///
/// Output cell `(i, j)` samples the 0/1 raster bilinearly at the cell
/// center; sample coordinates are clamped to the pixels that lie inside the
/// ROI (and the image), so the raster outside the ROI never leaks in.
pub fn extract_mask_target(instance: &BinaryMask, roi: &BoxXYXY, m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidArgument("mask target side must be >= 1".into()));
    }
    if !(roi.width() > 0.0 && roi.height() > 0.0) || !roi.is_valid() {
        return Err(Error::InvalidArgument(format!("zero-area roi {roi:?}")));
    }
    let (h, w) = (instance.height, instance.width);
    if h == 0 || w == 0 {
        return Ok(vec![0.0; m * m]);
    }
    let xs = sample_axis(roi.x1, roi.x2, m, w);
    let ys = sample_axis(roi.y1, roi.y2, m, h);
    let mut out = Vec::with_capacity(m * m);
    let px = |y: usize, x: usize| instance.bits[y * w + x] as f64;
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
            let bot = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(out)
}

/// Bilinear taps `(lo, hi, frac)` for `m` cell centers spanning `[a, b)`.
fn sample_axis(a: f64, b: f64, m: usize, size: usize) -> Vec<(usize, usize, f64)> {
    let last = (size - 1) as f64;
    let lo = a.clamp(0.0, last);
    let hi = (b - 1.0).clamp(lo, last);
    let step = (b - a) / m as f64;
    (0..m)
        .map(|j| {
            let u = (a + (j as f64 + 0.5) * step - 0.5).clamp(lo, hi);
            let i0 = u.floor();
            let frac = u - i0;
            let i0 = i0 as usize;
            (i0, (i0 + 1).min(size - 1), frac)
        })
        .collect()
}

#[inline]
fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Pastes an `m x m` grid of mask logits into an image-sized mask.
///
/// The logits go through the logistic function, are bilinearly resampled
/// at the center of every image pixel whose center lies inside `roi`, and
/// are kept where the probability is at least `threshold`.
pub fn paste_mask(
    logits: &[f64],
    m: usize,
    roi: &BoxXYXY,
    image_h: usize,
    image_w: usize,
    threshold: f64,
) -> Result<BinaryMask> {
    if logits.len() != m * m || m == 0 {
        return Err(Error::Shape(format!(
            "paste_mask: {} logits for a {m}x{m} grid",
            logits.len()
        )));
    }
    let mut out = BinaryMask::zeros(image_h, image_w);
    if !roi.is_valid() || roi.width() <= 0.0 || roi.height() <= 0.0 {
        return Ok(out);
    }
    let prob: Vec<f64> = logits.iter().map(|&v| logistic(v)).collect();
    let taps = |a: f64, b: f64, size: usize| -> Vec<(usize, usize, usize, f64)> {
        let first = (a - 0.5).ceil().max(0.0) as usize;
        let scale = m as f64 / (b - a);
        let mut v = Vec::new();
        let mut p = first;
        while p < size && (p as f64 + 0.5) < b {
            let g = ((p as f64 + 0.5 - a) * scale - 0.5).clamp(0.0, (m - 1) as f64);
            let g0 = g.floor();
            let gi = g0 as usize;
            v.push((p, gi, (gi + 1).min(m - 1), g - g0));
            p += 1;
        }
        v
    };
    let xs = taps(roi.x1, roi.x2, image_w);
    let ys = taps(roi.y1, roi.y2, image_h);
    for &(py, y0, y1, fy) in &ys {
        for &(px, x0, x1, fx) in &xs {
            let top = prob[y0 * m + x0] * (1.0 - fx) + prob[y0 * m + x1] * fx;
            let bot = prob[y1 * m + x0] * (1.0 - fx) + prob[y1 * m + x1] * fx;
            if top * (1.0 - fy) + bot * fy >= threshold {
                out.set(py, px, true);
            }
        }
    }
    Ok(out)
}

/// One `image_id,start len start len ...` line of a submission file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmissionLine {
    pub image_id: String,
    pub runs: Vec<(u64, u64)>,
}

impl SubmissionLine {
    pub fn from_mask(image_id: &str, mask: &BinaryMask) -> Self {
        SubmissionLine {
            image_id: image_id.to_string(),
            runs: rle_encode(mask).runs,
        }
    }

    pub fn parse(line: &str) -> Result<Self> {
        let (id, rest) = line
            .split_once(',')
            .ok_or_else(|| Error::Rle(format!("missing ',' in line {line:?}")))?;
        if id.is_empty() {
            return Err(Error::Rle(format!("empty image id in line {line:?}")));
        }
        let nums = rest
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<u64>()
                    .map_err(|_| Error::Rle(format!("bad integer {t:?} in line {line:?}")))
            })
            .collect::<Result<Vec<u64>>>()?;
        if nums.len() % 2 != 0 {
            return Err(Error::Rle(format!("odd number of integers in line {line:?}")));
        }
        let runs = nums.chunks(2).map(|c| (c[0], c[1])).collect();
        Ok(SubmissionLine {
            image_id: id.to_string(),
            runs,
        })
    }

    /// True when the line carries no runs (an image with no detections).
    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn to_rle(&self, height: usize, width: usize) -> RleMask {
        RleMask {
            height,
            width,
            runs: self.runs.clone(),
        }
    }

    pub fn to_mask(&self, height: usize, width: usize) -> Result<BinaryMask> {
        rle_decode(&self.to_rle(height, width))
    }
}

impl std::fmt::Display for SubmissionLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},", self.image_id)?;
        for (k, (start, len)) in self.runs.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{start} {len}")?;
        }
        Ok(())
    }
}

pub const SUBMISSION_HEADER: &str = "ImageId,EncodedPixels";

/// A whole submission file: an optional `ImageId,EncodedPixels` header and
/// one line per instance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Submission {
    pub header: bool,
    pub lines: Vec<SubmissionLine>,
}

impl Submission {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sub = Submission::default();
        for (k, raw) in text.lines().enumerate() {
            if raw.is_empty() {
                continue;
            }
            if k == 0 && raw == SUBMISSION_HEADER {
                sub.header = true;
                continue;
            }
            sub.lines.push(SubmissionLine::parse(raw)?);
        }
        Ok(sub)
    }

    /// Instances grouped per image, in file order. Lines without runs
    /// register the image with no instances.
    pub fn by_image(&self) -> Vec<(String, Vec<&SubmissionLine>)> {
        let mut out: Vec<(String, Vec<&SubmissionLine>)> = Vec::new();
        for line in &self.lines {
            let pos = match out.iter().position(|(id, _)| *id == line.image_id) {
                Some(p) => p,
                None => {
                    out.push((line.image_id.clone(), Vec::new()));
                    out.len() - 1
                }
            };
            if !line.is_empty() {
                out[pos].1.push(line);
            }
        }
        out
    }
}

impl std::fmt::Display for Submission {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.header {
            writeln!(f, "{SUBMISSION_HEADER}")?;
        }
        for line in &self.lines {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::new(h, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn rle_examples() {
        let ones = mask(2, 2, &[1, 1, 1, 1]);
        let r = rle_encode(&ones);
        assert_eq!(r.runs, vec![(1, 4)]);
        assert_eq!(r.encoded_pixels(), "1 4");
        assert!(rle_encode(&BinaryMask::zeros(3, 5)).runs.is_empty());
        // column-major: pixel (row 0, col 1) is position 3 in a 2-row mask
        let m = mask(2, 2, &[0, 1, 0, 0]);
        assert_eq!(rle_encode(&m).runs, vec![(3, 1)]);
    }

    #[test]
    fn rle_decode_rejects_bad_runs() {
        let bad = |runs: Vec<(u64, u64)>| RleMask { height: 3, width: 3, runs };
        assert!(rle_decode(&bad(vec![(0, 2)])).is_err());
        assert!(rle_decode(&bad(vec![(8, 3)])).is_err());
        assert!(rle_decode(&bad(vec![(1, 3), (2, 1)])).is_err());
        assert!(rle_decode(&bad(vec![(1, 3), (4, 1)])).is_err());
        assert!(rle_decode(&bad(vec![(5, 1), (1, 2)])).is_err());
        assert!(rle_decode(&bad(vec![(1, 3), (5, 5)])).is_ok());
    }

    #[test]
    fn mask_iou_examples() {
        let a = mask(3, 1, &[1, 1, 0]);
        let b = mask(3, 1, &[0, 1, 1]);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&mask(3, 1, &[1, 0, 0]), &mask(3, 1, &[0, 0, 1])).unwrap(), 0.0);
        assert_eq!(mask_iou(&BinaryMask::zeros(2, 2), &BinaryMask::zeros(2, 2)).unwrap(), 0.0);
        assert!(mask_iou(&a, &BinaryMask::zeros(1, 3)).is_err());
    }

    #[test]
    fn merge_examples() {
        let a = BinaryMask::rect(4, 4, 0, 0, 2, 2);
        let merged = merge_masks(&[a.clone()], 4, 4).unwrap();
        assert_eq!(merged.num_instances(), 1);
        assert_eq!(merged.instance(1), a);

        let b = BinaryMask::rect(4, 4, 2, 2, 4, 4);
        let merged = merge_masks(&[a.clone(), b.clone()], 4, 4).unwrap();
        assert_eq!(merged.instance(1), a);
        assert_eq!(merged.instance(2), b);

        // big covers a 3x3 block, small a 1x2 strip; they share pixel (2, 2)
        let big = BinaryMask::rect(4, 4, 0, 0, 3, 3);
        let small = BinaryMask::rect(4, 4, 2, 2, 4, 3);
        let merged = merge_masks(&[big.clone(), small.clone()], 4, 4).unwrap();
        assert_eq!(merged.labels[2 * 4 + 2], 2);
        assert_eq!(merged.instance(2), small);
        assert_eq!(merged.instance(1).count(), big.count() - 1);

        let empty = merge_masks(&[], 3, 2).unwrap();
        assert!(empty.labels.iter().all(|&l| l == 0));
        assert!(merge_masks(&[a], 3, 3).is_err());
    }

    #[test]
    fn merge_compacts_shadowed_instances() {
        let inner = BinaryMask::rect(4, 4, 1, 1, 3, 3);
        let other = BinaryMask::rect(4, 4, 0, 0, 1, 1);
        // inner is listed twice; the second copy loses every pixel to the first
        let merged = merge_masks(&[inner.clone(), inner, other.clone()], 4, 4).unwrap();
        assert_eq!(merged.num_instances(), 2);
        assert_eq!(merged.instance(2), other);
    }

    #[test]
    fn extract_examples() {
        let full = BinaryMask::rect(10, 10, 2, 2, 8, 8);
        let roi = BoxXYXY { x1: 3., y1: 3., x2: 7., y2: 7. };
        assert!(extract_mask_target(&full, &roi, 5).unwrap().iter().all(|&v| v == 1.0));
        let bg = BoxXYXY { x1: 0., y1: 8., x2: 10., y2: 10. };
        assert!(extract_mask_target(&full, &bg, 5).unwrap().iter().all(|&v| v == 0.0));
        let zero = BoxXYXY { x1: 3., y1: 3., x2: 3., y2: 7. };
        assert!(extract_mask_target(&full, &zero, 5).is_err());
    }

    /// Independent reference: crop the ROI, then resize with half-pixel
    /// centers and edge clamping, written as the textbook formula.
    fn crop_resize_oracle(m: &BinaryMask, x1: usize, y1: usize, x2: usize, y2: usize, out: usize) -> Vec<f64> {
        let (cw, ch) = (x2 - x1, y2 - y1);
        let crop = |y: isize, x: isize| -> f64 {
            let y = y.clamp(0, ch as isize - 1) as usize;
            let x = x.clamp(0, cw as isize - 1) as usize;
            m.get(y1 + y, x1 + x) as u8 as f64
        };
        let mut v = Vec::new();
        for i in 0..out {
            let sy = ((i as f64 + 0.5) * ch as f64 / out as f64 - 0.5).max(0.0);
            for j in 0..out {
                let sx = ((j as f64 + 0.5) * cw as f64 / out as f64 - 0.5).max(0.0);
                let (y0, x0) = (sy.floor() as isize, sx.floor() as isize);
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                v.push(
                    crop(y0, x0) * (1. - fy) * (1. - fx)
                        + crop(y0, x0 + 1) * (1. - fy) * fx
                        + crop(y0 + 1, x0) * fy * (1. - fx)
                        + crop(y0 + 1, x0 + 1) * fy * fx,
                );
            }
        }
        v
    }

    #[test]
    fn extract_matches_bilinear_oracle() {
        // left half of a 4x8 region set; the roi is twice the region's size
        let inst = BinaryMask::from_fn(16, 16, |y, x| (4..8).contains(&y) && (4..8).contains(&x));
        for m in [3usize, 7, 14, 28] {
            let roi = BoxXYXY { x1: 4., y1: 2., x2: 12., y2: 10. };
            let got = extract_mask_target(&inst, &roi, m).unwrap();
            let want = crop_resize_oracle(&inst, 4, 2, 12, 10, m);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-6, "m={m}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn paste_examples() {
        let roi = BoxXYXY { x1: 2., y1: 3., x2: 6., y2: 9. };
        let on = paste_mask(&[20.0; 4], 2, &roi, 12, 10, 0.5).unwrap();
        assert_eq!(on, BinaryMask::rect(12, 10, 2, 3, 6, 9));
        let off = paste_mask(&[-20.0; 4], 2, &roi, 12, 10, 0.5).unwrap();
        assert!(off.is_empty());
        let outside = BoxXYXY { x1: 20., y1: 20., x2: 30., y2: 30. };
        assert!(paste_mask(&[20.0; 4], 2, &outside, 12, 10, 0.5).unwrap().is_empty());
        assert!(paste_mask(&[20.0; 3], 2, &roi, 12, 10, 0.5).is_err());
    }

    #[test]
    fn submission_line_roundtrip() {
        let text = "ImageId,EncodedPixels\nabc,1 4 9 2\nabc,20 1\nempty,\n";
        let sub = Submission::parse(text).unwrap();
        assert!(sub.header);
        assert_eq!(sub.lines.len(), 3);
        assert_eq!(sub.to_string(), text);
        let groups = sub.by_image();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[1].1.len(), 0);
        assert!(SubmissionLine::parse("abc 1 4").is_err());
        assert!(SubmissionLine::parse("abc,1 4 5").is_err());
        assert!(SubmissionLine::parse("abc,1 x").is_err());
    }

    fn arb_mask(max_side: usize) -> impl Strategy<Value = BinaryMask> {
        (1..=max_side, 1..=max_side, 0.0..1.0f64, any::<u64>()).prop_map(|(h, w, density, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            BinaryMask::from_fn(h, w, |_, _| rng.random::<f64>() < density)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rle_roundtrip(m in arb_mask(512)) {
            let r = rle_encode(&m);
            prop_assert!(r.validate().is_ok());
            prop_assert_eq!(rle_decode(&r).unwrap(), m);
        }

        #[test]
        fn mask_iou_symmetric(a in arb_mask(64), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = BinaryMask::from_fn(a.height(), a.width(), |_, _| rng.random::<bool>());
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() {
                prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn extract_paste_recovers_rectangles(
            x1 in 0usize..20, y1 in 0usize..20, w in 2usize..20, h in 2usize..20, m in 2usize..30
        ) {
            let (ih, iw) = (48, 48);
            let rect = BinaryMask::rect(ih, iw, x1, y1, x1 + w, y1 + h);
            let roi = BoxXYXY { x1: x1 as f64, y1: y1 as f64, x2: (x1 + w) as f64, y2: (y1 + h) as f64 };
            let target = extract_mask_target(&rect, &roi, m).unwrap();
            let logits: Vec<f64> = target
                .iter()
                .map(|&p| { let p = p.clamp(1e-9, 1.0 - 1e-9); (p / (1.0 - p)).ln() })
                .collect();
            let back = paste_mask(&logits, m, &roi, ih, iw, 0.5).unwrap();
            prop_assert_eq!(mask_iou(&back, &rect).unwrap(), 1.0);
        }

        #[test]
        fn merge_conserves_pixels_for_disjoint_inputs(n in 1usize..6) {
            let masks: Vec<BinaryMask> = (0..n).map(|k| BinaryMask::rect(8, 32, 5 * k, 1, 5 * k + 3, 6)).collect();
            let merged = merge_masks(&masks, 8, 32).unwrap();
            let labelled = merged.labels.iter().filter(|&&l| l > 0).count();
            prop_assert_eq!(labelled, masks.iter().map(BinaryMask::count).sum::<usize>());
        }
    }
}
