use rand::seq::index;
use rand::Rng;

use crate::autodiff::RoiRef;
use crate::geometry::{encode_delta, iou_box, BoxDelta, BoxXYXY};
use crate::maskops::{extract_mask_target, BinaryMask};
use crate::Result;

/// Pyramid level (2..=5) for a region:
/// `clamp(floor(k0 + log2(sqrt(w h) / canonical)), 2, 5)`.
pub fn assign_roi_level(roi: &BoxXYXY, k0: usize, canonical: f64) -> usize {
    let side = (roi.width() * roi.height()).max(f64::MIN_POSITIVE).sqrt();
    let k = (k0 as f64 + (side / canonical).log2()).floor();
    k.clamp(2.0, 5.0) as usize
}

/// ROI-Align references into P2..P5 for a list of boxes on batch item 0.
pub fn route_rois(rois: &[BoxXYXY], k0: usize, canonical: f64) -> Vec<RoiRef> {
    rois.iter()
        .map(|r| RoiRef {
            feature: assign_roi_level(r, k0, canonical) - 2,
            batch: 0,
            bbox: *r,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSampleConfig {
    pub batch: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    /// Side of the mask-head target grid.
    pub mask_size: usize,
}

impl Default for RoiSampleConfig {
    fn default() -> Self {
        RoiSampleConfig {
            batch: 128,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            mask_size: 28,
        }
    }
}

/// One sampled training region and its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledRoi {
    pub bbox: BoxXYXY,
    /// 1 nucleus, 0 background, -1 ignored.
    pub label: i64,
    /// Foreground only.
    pub delta: Option<BoxDelta>,
    /// Foreground only: `mask_size^2` soft targets.
    pub mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionTargets {
    pub rois: Vec<SampledRoi>,
    pub mask_size: usize,
}

impl DetectionTargets {
    pub fn boxes(&self) -> Vec<BoxXYXY> {
        self.rois.iter().map(|r| r.bbox).collect()
    }

    pub fn labels(&self) -> Vec<i64> {
        self.rois.iter().map(|r| r.label).collect()
    }

    /// Indices of foreground regions.
    pub fn foreground(&self) -> Vec<usize> {
        (0..self.rois.len()).filter(|&i| self.rois[i].label == 1).collect()
    }
}

/// Samples regions from `proposals` plus the gt boxes themselves and
/// builds class, box and mask targets.
///
/// A region is foreground when its best gt IoU is at least `fg_iou`, and
/// background otherwise. At most `round(batch * fg_fraction)` foreground
/// regions are kept, then background fills the batch. Foreground regions
/// come first in the output.
pub fn sample_rois(
    proposals: &[BoxXYXY],
    gt_boxes: &[BoxXYXY],
    gt_masks: &[BinaryMask],
    cfg: &RoiSampleConfig,
    rng: &mut impl Rng,
) -> Result<DetectionTargets> {
    let mut cands: Vec<BoxXYXY> = proposals.to_vec();
    cands.extend_from_slice(gt_boxes);
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let mut matched = vec![0usize; cands.len()];
    for (i, c) in cands.iter().enumerate() {
        let mut best = 0.0;
        for (g, gt) in gt_boxes.iter().enumerate() {
            let v = iou_box(c, gt);
            if v > best {
                best = v;
                matched[i] = g;
            }
        }
        if !gt_boxes.is_empty() && best >= cfg.fg_iou {
            fg.push(i);
        } else {
            bg.push(i);
        }
    }
    let max_fg = (cfg.batch as f64 * cfg.fg_fraction).round() as usize;
    let fg = pick(&fg, max_fg, rng);
    let bg = pick(&bg, cfg.batch - fg.len(), rng);
    let mut rois = Vec::with_capacity(fg.len() + bg.len());
    for &i in &fg {
        let g = matched[i];
        rois.push(SampledRoi {
            bbox: cands[i],
            label: 1,
            delta: Some(encode_delta(&cands[i], &gt_boxes[g])?),
            mask: Some(extract_mask_target(&gt_masks[g], &cands[i], cfg.mask_size)?),
        });
    }
    for &i in &bg {
        rois.push(SampledRoi {
            bbox: cands[i],
            label: 0,
            delta: None,
            mask: None,
        });
    }
    Ok(DetectionTargets {
        rois,
        mask_size: cfg.mask_size,
    })
}

fn pick(idx: &[usize], keep: usize, rng: &mut impl Rng) -> Vec<usize> {
    if idx.len() <= keep {
        return idx.to_vec();
    }
    let mut chosen: Vec<usize> = index::sample(rng, idx.len(), keep).into_iter().collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|k| idx[k]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn level_examples() {
        let sq = |s: f64| BoxXYXY { x1: 0.0, y1: 0.0, x2: s, y2: s };
        assert_eq!(assign_roi_level(&sq(56.0), 2, 56.0), 2);
        assert_eq!(assign_roi_level(&sq(112.0), 2, 56.0), 3);
        assert_eq!(assign_roi_level(&sq(448.0), 2, 56.0), 5);
        assert_eq!(assign_roi_level(&sq(3.0), 2, 56.0), 2);
        let mut last = 2;
        for s in 1..600 {
            let l = assign_roi_level(&sq(s as f64), 2, 56.0);
            assert!(l >= last);
            last = l;
        }
    }

    #[test]
    fn gt_boxes_become_foreground() {
        let mask = BinaryMask::rect(32, 32, 4, 4, 20, 20);
        let gt = mask.bbox().unwrap();
        let far = BoxXYXY { x1: 24.0, y1: 24.0, x2: 31.0, y2: 31.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_rois(&[far], &[gt], &[mask], &RoiSampleConfig::default(), &mut rng).unwrap();
        assert_eq!(t.labels(), vec![1, 0]);
        assert_eq!(t.rois[0].delta, Some(BoxDelta::default()));
        assert!(t.rois[0].mask.as_ref().unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn caps_foreground_share() {
        let mask = BinaryMask::rect(64, 64, 0, 0, 40, 40);
        let gt = mask.bbox().unwrap();
        let props = vec![gt; 100];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_rois(&props, &[gt], &[mask], &RoiSampleConfig::default(), &mut rng).unwrap();
        assert_eq!(t.foreground().len(), 32);
        assert_eq!(t.rois.len(), 32);
    }
}
