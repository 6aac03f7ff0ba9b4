//! Axis-aligned box arithmetic in continuous pixel coordinates.
//!
//! Coordinates have their origin at the top-left corner with y pointing down.
//! Areas are computed as `(x2 - x1) * (y2 - y1)` with no "+1" pixel
//! convention, so a box `(0, 0, 1, 1)` covers exactly one pixel.

use std::cmp::Ordering;

use crate::{Error, Result};

/// Largest log-scale regression value accepted when decoding a delta.
pub const DELTA_SIZE_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXYXY {
    /// Builds a box, rejecting inverted or non-finite coordinates.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoxXYXY { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::InvalidArgument(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 >= self.x1
            && self.y2 >= self.y1
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxXYXY {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn scale(&self, factor: f64) -> Self {
        BoxXYXY {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Normalized regression offsets from an anchor (or ROI) to a target box.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxDelta {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

/// Anchor layout over a feature pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpec {
    /// Stride in pixels of each pyramid level, strictly increasing.
    pub strides: Vec<usize>,
    /// Anchor side lengths (sqrt of area) per level.
    pub scales: Vec<Vec<f64>>,
    /// Height / width ratios, shared by every level.
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec {
            strides: vec![4, 8, 16, 32],
            scales: vec![vec![16.0], vec![32.0], vec![64.0], vec![128.0]],
            aspect_ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.len() != self.scales.len() {
            return Err(Error::InvalidArgument(
                "anchor spec needs one scale list per stride".into(),
            ));
        }
        if self.strides.windows(2).any(|w| w[1] <= w[0]) || self.strides[0] == 0 {
            return Err(Error::InvalidArgument(
                "anchor strides must be positive and strictly increasing".into(),
            ));
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if self.aspect_ratios.is_empty() || !self.aspect_ratios.iter().all(positive) {
            return Err(Error::InvalidArgument("aspect ratios must be positive".into()));
        }
        if self.scales.iter().any(|s| s.is_empty() || !s.iter().all(positive)) {
            return Err(Error::InvalidArgument("anchor scales must be positive".into()));
        }
        Ok(())
    }

    /// Anchors generated per feature cell at `level`.
    pub fn anchors_per_cell(&self, level: usize) -> usize {
        self.scales[level].len() * self.aspect_ratios.len()
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }

    /// Closed-form anchor count for an image.
    pub fn anchor_count(&self, image_h: usize, image_w: usize) -> usize {
        (0..self.num_levels())
            .map(|l| {
                let s = self.strides[l];
                image_h.div_ceil(s) * image_w.div_ceil(s) * self.anchors_per_cell(l)
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BoxXYXY,
    pub level: usize,
}

/// Intersection over union of two boxes. Zero-area boxes give 0.
pub fn iou_box(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices sorted by descending score, ties broken by lower index.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression.
///
/// Returns kept indices in descending score order. A box is suppressed when
/// its IoU with an already kept box is strictly greater than `iou_threshold`.
pub fn nms(boxes: &[BoxXYXY], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Shape(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::InvalidArgument(format!(
            "nms threshold {iou_threshold} outside [0, 1]"
        )));
    }
    let order = argsort_desc(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou_box(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

/// Regression target taking `anchor` to `gt`.
pub fn encode_delta(anchor: &BoxXYXY, gt: &BoxXYXY) -> Result<BoxDelta> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "anchor {anchor:?} has non-positive size"
        )));
    }
    let (gw, gh) = (gt.width(), gt.height());
    if !(gw > 0.0 && gh > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth box {gt:?} has non-positive size"
        )));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(BoxDelta {
        dx: (gcx - acx) / aw,
        dy: (gcy - acy) / ah,
        dw: (gw / aw).ln(),
        dh: (gh / ah).ln(),
    })
}

/// Applies `delta` to `anchor`. Size offsets are clamped to
/// [`DELTA_SIZE_CLAMP`] so that wild predictions cannot overflow.
pub fn decode_delta(anchor: &BoxXYXY, delta: &BoxDelta) -> BoxXYXY {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let dw = delta.dw.min(DELTA_SIZE_CLAMP);
    let dh = delta.dh.min(DELTA_SIZE_CLAMP);
    let cx = acx + delta.dx * aw;
    let cy = acy + delta.dy * ah;
    BoxXYXY::from_center(cx, cy, aw * dw.exp(), ah * dh.exp())
}

/// Tiles anchors over every pyramid level.
///
/// Ordering: level, then feature row, then feature column, then scale, then
/// aspect ratio. The RPN head emits its outputs in the same order.
pub fn generate_anchors(spec: &AnchorSpec, image_h: usize, image_w: usize) -> Vec<Anchor> {
    let mut out = Vec::with_capacity(spec.anchor_count(image_h, image_w));
    for (level, &stride) in spec.strides.iter().enumerate() {
        let s = stride as f64;
        let (gh, gw) = (image_h.div_ceil(stride), image_w.div_ceil(stride));
        for row in 0..gh {
            for col in 0..gw {
                let cx = s * (col as f64 + 0.5);
                let cy = s * (row as f64 + 0.5);
                for &scale in &spec.scales[level] {
                    for &ratio in &spec.aspect_ratios {
                        let r = ratio.sqrt();
                        out.push(Anchor {
                            bbox: BoxXYXY::from_center(cx, cy, scale / r, scale * r),
                            level,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Clamps a box into `[0, w] x [0, h]`.
pub fn clip_box(b: &BoxXYXY, image_h: usize, image_w: usize) -> BoxXYXY {
    let (w, h) = (image_w as f64, image_h as f64);
    let x1 = b.x1.clamp(0.0, w);
    let y1 = b.y1.clamp(0.0, h);
    BoxXYXY {
        x1,
        y1,
        x2: b.x2.clamp(0.0, w).max(x1),
        y2: b.y2.clamp(0.0, h).max(y1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXYXY {
        BoxXYXY::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts covered cells of a `res`-per-pixel raster.
    fn raster_iou(a: &BoxXYXY, b: &BoxXYXY, res: usize, extent: f64) -> f64 {
        let n = (extent * res as f64) as usize;
        let (mut inter, mut uni) = (0usize, 0usize);
        for i in 0..n {
            let y = (i as f64 + 0.5) / res as f64;
            for j in 0..n {
                let x = (j as f64 + 0.5) / res as f64;
                let ia = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
                let ib = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
                inter += (ia && ib) as usize;
                uni += (ia || ib) as usize;
            }
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou_box(&bx(0., 0., 1., 1.), &bx(0., 0., 1., 1.)), 1.0);
        assert_eq!(iou_box(&bx(0., 0., 1., 1.), &bx(5., 5., 6., 6.)), 0.0);
        let a = bx(0., 0., 2., 2.);
        let b = bx(1., 1., 3., 3.);
        let oracle = raster_iou(&a, &b, 1000, 3.0);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-9);
        assert!((iou_box(&a, &b) - oracle).abs() < 1e-12);
        // degenerate boxes never divide by zero
        assert_eq!(iou_box(&bx(1., 1., 1., 1.), &bx(1., 1., 1., 1.)), 0.0);
    }

    #[test]
    fn nms_examples() {
        let b = bx(0., 0., 10., 10.);
        assert_eq!(nms(&[b], &[0.3], 0.5).unwrap(), vec![0]);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5).unwrap(), vec![1]);
        assert!(nms(&[], &[], 0.5).unwrap().is_empty());
        assert!(nms(&[b], &[], 0.5).is_err());
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let b = bx(0., 0., 10., 10.);
        assert_eq!(nms(&[b, b, b], &[0.5, 0.5, 0.5], 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn delta_examples() {
        let a = bx(0., 0., 10., 10.);
        assert_eq!(encode_delta(&a, &a).unwrap(), BoxDelta::default());
        let d = encode_delta(&a, &bx(5., 5., 15., 15.)).unwrap();
        assert_eq!(d, BoxDelta { dx: 0.5, dy: 0.5, dw: 0.0, dh: 0.0 });
        assert!(encode_delta(&a, &bx(3., 3., 3., 9.)).is_err());
        assert!(encode_delta(&bx(1., 1., 1., 4.), &a).is_err());
    }

    #[test]
    fn delta_roundtrip_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let size = 512.0;
        let rand_box = |rng: &mut ChaCha8Rng| {
            let x1 = rng.random_range(0.0..size - 40.0);
            let y1 = rng.random_range(0.0..size - 40.0);
            bx(x1, y1, x1 + rng.random_range(1.0..40.0), y1 + rng.random_range(1.0..40.0))
        };
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let a = rand_box(&mut rng);
            let g = rand_box(&mut rng);
            let back = decode_delta(&a, &encode_delta(&a, &g).unwrap());
            for (p, q) in back.to_array().iter().zip(g.to_array()) {
                worst = worst.max((p - q).abs());
            }
        }
        assert!(worst < 1e-6 * size, "worst {worst}");
    }

    #[test]
    fn decode_clamps_size_offsets() {
        let a = bx(0., 0., 16., 16.);
        let d = BoxDelta { dx: 0., dy: 0., dw: 50., dh: 50. };
        let b = decode_delta(&a, &d);
        assert!((b.width() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn anchor_examples() {
        let one = AnchorSpec {
            strides: vec![8],
            scales: vec![vec![8.0]],
            aspect_ratios: vec![1.0],
        };
        let a = generate_anchors(&one, 8, 8);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].bbox.center(), (4.0, 4.0));

        let two = AnchorSpec {
            strides: vec![4, 8],
            scales: vec![vec![16.0], vec![32.0]],
            aspect_ratios: vec![0.5, 1.0, 2.0],
        };
        let a = generate_anchors(&two, 64, 64);
        assert_eq!(a.len(), 16 * 16 * 3 + 8 * 8 * 3);
        assert_eq!(a.len(), two.anchor_count(64, 64));
        for anc in &a {
            let s = two.scales[anc.level][0];
            assert!((anc.bbox.area() - s * s).abs() < 1e-6 * s * s);
        }
        for (k, anc) in a.iter().take(3).enumerate() {
            let r = anc.bbox.height() / anc.bbox.width();
            assert!((r - two.aspect_ratios[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn anchor_spec_validation() {
        assert!(AnchorSpec::default().validate().is_ok());
        let mut bad = AnchorSpec::default();
        bad.strides = vec![8, 4, 16, 32];
        assert!(bad.validate().is_err());
        let mut bad = AnchorSpec::default();
        bad.aspect_ratios = vec![0.0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_box(&bx(-5., -5., 3., 3.), 10, 10), bx(0., 0., 3., 3.));
        assert_eq!(clip_box(&bx(1., 2., 3., 4.), 10, 10), bx(1., 2., 3., 4.));
        assert_eq!(clip_box(&bx(8., 8., 20., 20.), 10, 10), bx(8., 8., 10., 10.));
        assert!(clip_box(&bx(12., 12., 20., 20.), 10, 10).is_valid());
    }

    fn arb_box() -> impl Strategy<Value = BoxXYXY> {
        (0.0..100.0f64, 0.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64)
            .prop_map(|(x, y, w, h)| BoxXYXY { x1: x, y1: y, x2: x + w, y2: y + h })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou_box(&a, &b);
            prop_assert_eq!(ab, iou_box(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if a.area() > 0.0 {
                prop_assert!((iou_box(&a, &a) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn anchor_count_closed_form(h in 1usize..200, w in 1usize..200) {
            let spec = AnchorSpec::default();
            prop_assert_eq!(generate_anchors(&spec, h, w).len(), spec.anchor_count(h, w));
        }
    }
}
