use rand::seq::index;
use rand::Rng;

use super::fpn::PyramidFeatures;
use super::layers::Conv;
use crate::autodiff::{ParamStore, Real, StageTag, Tape, Var};
use crate::geometry::{argsort_desc, clip_box, decode_delta, encode_delta, iou_box, nms, Anchor, BoxDelta, BoxXYXY};
use crate::{Error, Result};

/// Shared 3x3 conv followed by sibling 1x1 objectness and delta heads,
/// applied to every pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHead {
    pub anchors_per_cell: usize,
    pub shared: Conv,
    pub objectness: Conv,
    pub deltas: Conv,
}

/// Per-anchor RPN outputs, rows in [`crate::geometry::generate_anchors`]
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RpnOutputs {
    /// `[anchors]`
    pub logits: Var,
    /// `[anchors, 4]`
    pub deltas: Var,
}

impl RpnHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, channels: usize, anchors_per_cell: usize, rng: &mut impl Rng) -> Self {
        let a = anchors_per_cell;
        RpnHead {
            anchors_per_cell: a,
            shared: Conv::new(store, "rpn.conv", channels, channels, 3, 1, StageTag::Head, rng),
            objectness: Conv::new(store, "rpn.objectness", channels, a, 1, 0, StageTag::Head, rng),
            deltas: Conv::new(store, "rpn.deltas", channels, 4 * a, 1, 0, StageTag::Head, rng),
        }
    }

    /// Runs the head on each map in `levels` (in order) and concatenates.
    pub fn forward_levels<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, levels: &[Var]) -> Result<RpnOutputs> {
        let mut logits = Vec::with_capacity(levels.len());
        let mut deltas = Vec::with_capacity(levels.len());
        for &p in levels {
            if tape.value(p).shape()[0] != 1 {
                return Err(Error::Shape("rpn runs on one image per tape".into()));
            }
            let h = self.shared.forward_relu(tape, store, p)?;
            let z = self.objectness.forward(tape, store, h)?;
            let d = self.deltas.forward(tape, store, h)?;
            logits.push(tape.anchor_rows(z, 1)?);
            deltas.push(tape.anchor_rows(d, 4)?);
        }
        let z = tape.concat(&logits, 1)?;
        let d = tape.concat(&deltas, 1)?;
        let n = tape.value(z).len();
        Ok(RpnOutputs {
            logits: tape.reshape(z, &[n])?,
            deltas: tape.reshape(d, &[n, 4])?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, p: &PyramidFeatures) -> Result<RpnOutputs> {
        self.forward_levels(tape, store, &p.levels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnTargetConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub batch: usize,
    pub pos_fraction: f64,
}

impl Default for RpnTargetConfig {
    fn default() -> Self {
        RpnTargetConfig {
            pos_iou: 0.7,
            neg_iou: 0.3,
            batch: 256,
            pos_fraction: 0.5,
        }
    }
}

/// Sampled RPN training targets, one entry per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnTargets {
    /// 1 positive, 0 negative, -1 ignored.
    pub labels: Vec<i64>,
    /// Regression target for every positive anchor, `None` elsewhere.
    pub deltas: Vec<Option<BoxDelta>>,
}

impl RpnTargets {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == 1).collect()
    }
}

/// IoU-based anchor labelling before sampling.
///
/// Returns `(labels, matched_gt)`. An anchor is positive when its best IoU
/// reaches `pos_iou`, or when it attains (with ties) the best IoU of some gt
/// box and that IoU is nonzero. Anchors below `neg_iou` and not positive are
/// negative; the rest are ignored. `matched_gt` is the anchor's highest-IoU
/// gt (lowest index on ties).
pub fn label_anchors(anchors: &[BoxXYXY], gts: &[BoxXYXY], cfg: &RpnTargetConfig) -> (Vec<i64>, Vec<usize>) {
    let n = anchors.len();
    if gts.is_empty() {
        return (vec![0; n], vec![0; n]);
    }
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut arg = vec![0usize; n];
    let mut gt_best = vec![0.0f64; gts.len()];
    let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou_box(a, g)).collect()).collect();
    for (i, row) in ious.iter().enumerate() {
        for (g, &v) in row.iter().enumerate() {
            if v > best[i] {
                best[i] = v;
                arg[i] = g;
            }
            gt_best[g] = gt_best[g].max(v);
        }
    }
    let mut labels: Vec<i64> = best
        .iter()
        .map(|&b| if b >= cfg.pos_iou { 1 } else if b < cfg.neg_iou { 0 } else { -1 })
        .collect();
    for (i, row) in ious.iter().enumerate() {
        if row.iter().zip(&gt_best).any(|(&v, &gb)| gb > 0.0 && v == gb) {
            labels[i] = 1;
        }
    }
    (labels, arg)
}

/// Subsamples labelled anchors to at most `batch` with at most
/// `round(batch * pos_fraction)` positives; unsampled anchors become -1.
pub fn sample_labels(labels: &mut [i64], cfg: &RpnTargetConfig, rng: &mut impl Rng) {
    let max_pos = (cfg.batch as f64 * cfg.pos_fraction).round() as usize;
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    keep_random(labels, &pos, max_pos, rng);
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    keep_random(labels, &neg, cfg.batch.saturating_sub(n_pos), rng);
}

/// Marks all but `keep` randomly chosen members of `idx` as ignored.
fn keep_random(labels: &mut [i64], idx: &[usize], keep: usize, rng: &mut impl Rng) {
    if idx.len() <= keep {
        return;
    }
    let mut chosen = vec![false; idx.len()];
    for k in index::sample(rng, idx.len(), keep) {
        chosen[k] = true;
    }
    for (k, &i) in idx.iter().enumerate() {
        if !chosen[k] {
            labels[i] = -1;
        }
    }
}

/// Labels, samples and computes regression targets for every anchor.
pub fn assign_rpn_targets(
    anchors: &[BoxXYXY],
    gts: &[BoxXYXY],
    cfg: &RpnTargetConfig,
    rng: &mut impl Rng,
) -> Result<RpnTargets> {
    let (mut labels, matched) = label_anchors(anchors, gts, cfg);
    sample_labels(&mut labels, cfg, rng);
    let deltas = labels
        .iter()
        .zip(&matched)
        .zip(anchors)
        .map(|((&l, &g), a)| if l == 1 { encode_delta(a, &gts[g]).map(Some) } else { Ok(None) })
        .collect::<Result<Vec<_>>>()?;
    Ok(RpnTargets { labels, deltas })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoxXYXY,
    /// Logistic of the objectness logit.
    pub objectness: f64,
    /// Pyramid index of the source anchor.
    pub level: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
    pub post_nms_top_k: usize,
    /// Anchors whose objectness falls below this are never proposed.
    pub min_objectness: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_top_k: 2000,
            nms_iou: 0.7,
            post_nms_top_k: 512,
            min_objectness: 0.0,
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Top-k by objectness, decode, clip, drop boxes with a side under one
/// pixel, NMS, top-k. The result is sorted by objectness, highest first.
pub fn generate_proposals(
    logits: &[f64],
    deltas: &[BoxDelta],
    anchors: &[Anchor],
    image_h: usize,
    image_w: usize,
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    if logits.len() != anchors.len() || deltas.len() != anchors.len() {
        return Err(Error::Shape(format!(
            "{} logits and {} deltas for {} anchors",
            logits.len(),
            deltas.len(),
            anchors.len()
        )));
    }
    let mut cands = Vec::new();
    for i in argsort_desc(logits).into_iter().take(cfg.pre_nms_top_k) {
        let objectness = sigmoid(logits[i]);
        if objectness < cfg.min_objectness {
            continue;
        }
        let b = clip_box(&decode_delta(&anchors[i].bbox, &deltas[i]), image_h, image_w);
        if !(b.width() >= 1.0 && b.height() >= 1.0) {
            continue;
        }
        cands.push(Proposal {
            bbox: b,
            objectness,
            level: anchors[i].level,
        });
    }
    let boxes: Vec<BoxXYXY> = cands.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = cands.iter().map(|p| p.objectness).collect();
    let keep = nms(&boxes, &scores, cfg.nms_iou)?;
    Ok(keep.into_iter().take(cfg.post_nms_top_k).map(|k| cands[k]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXYXY {
        BoxXYXY { x1, y1, x2, y2 }
    }

    #[test]
    fn exact_match_is_positive_with_zero_delta() {
        let anchors = [b(0.0, 0.0, 10.0, 10.0), b(20.0, 20.0, 30.0, 30.0), b(5.0, 5.0, 15.0, 15.0)];
        let gts = [b(20.0, 20.0, 30.0, 30.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = assign_rpn_targets(&anchors, &gts, &RpnTargetConfig::default(), &mut rng).unwrap();
        assert_eq!(t.labels, vec![0, 1, 0]);
        assert_eq!(t.deltas[1], Some(BoxDelta::default()));
    }

    #[test]
    fn no_gt_means_all_negative() {
        let anchors: Vec<BoxXYXY> = (0..300).map(|i| b(i as f64, 0.0, i as f64 + 4.0, 4.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = assign_rpn_targets(&anchors, &[], &RpnTargetConfig::default(), &mut rng).unwrap();
        assert_eq!(t.labels.iter().filter(|&&l| l == 0).count(), 256);
        assert!(t.labels.iter().all(|&l| l <= 0));
        assert!(t.positives().is_empty());
    }

    #[test]
    fn sampling_caps_positives() {
        let anchors = vec![b(0.0, 0.0, 10.0, 10.0); 400];
        let gts = [b(0.0, 0.0, 10.0, 10.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = assign_rpn_targets(&anchors, &gts, &RpnTargetConfig::default(), &mut rng).unwrap();
        assert_eq!(t.positives().len(), 128);
    }

    #[test]
    fn single_anchor_proposal() {
        let anchors = [Anchor { bbox: b(4.0, 4.0, 20.0, 20.0), level: 0 }];
        let p = generate_proposals(&[2.0], &[BoxDelta::default()], &anchors, 32, 32, &ProposalConfig::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].bbox, anchors[0].bbox);
        assert!((p[0].objectness - sigmoid(2.0)).abs() < 1e-15);
    }

    #[test]
    fn duplicates_collapse() {
        let a = Anchor { bbox: b(4.0, 4.0, 20.0, 20.0), level: 1 };
        let p = generate_proposals(&[1.0, 1.0, 0.5], &[BoxDelta::default(); 3], &[a; 3], 32, 32, &ProposalConfig::default())
            .unwrap();
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn min_objectness_filters_everything() {
        let a = Anchor { bbox: b(4.0, 4.0, 20.0, 20.0), level: 0 };
        let cfg = ProposalConfig { min_objectness: 1e-3, ..Default::default() };
        let p = generate_proposals(&[-20.0], &[BoxDelta::default()], &[a], 32, 32, &cfg).unwrap();
        assert!(p.is_empty());
    }
}
