//! Mask-matching evaluation: COCO-style AP over IoU thresholds 0.50..0.95
//! and mean matched mask IoU.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::maskops::{BinaryMask, Submission};
use crate::{Error, Result};

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub threshold: f64,
    /// `(pred, gt, iou)` in the order the predictions were visited.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// IoU of every prediction against every ground truth, `[pred][gt]`.
pub fn iou_matrix(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<Vec<Vec<f64>>> {
    let dims = |m: &BinaryMask| (m.height(), m.width());
    if let Some(first) = preds.first().or(gts.first()) {
        let d = dims(first);
        if let Some(bad) = preds.iter().chain(gts).find(|m| dims(m) != d) {
            return Err(Error::Shape(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                d.0,
                d.1,
                bad.height(),
                bad.width()
            )));
        }
    }
    let boxes = |ms: &[BinaryMask]| -> Vec<Option<(usize, usize, usize, usize, usize)>> {
        ms.iter()
            .map(|m| {
                m.bbox()
                    .map(|b| (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize, m.count()))
            })
            .collect()
    };
    let (pb, gb) = (boxes(preds), boxes(gts));
    Ok(preds
        .par_iter()
        .zip(&pb)
        .map(|(p, pbox)| {
            gts.iter()
                .zip(&gb)
                .map(|(g, gbox)| match (pbox, gbox) {
                    (Some(a), Some(b)) => {
                        let (x1, y1) = (a.0.max(b.0), a.1.max(b.1));
                        let (x2, y2) = (a.2.min(b.2), a.3.min(b.3));
                        if x1 >= x2 || y1 >= y2 {
                            return 0.0;
                        }
                        let w = p.width();
                        let mut inter = 0usize;
                        for y in y1..y2 {
                            let r = y * w;
                            inter += p.bits()[r + x1..r + x2]
                                .iter()
                                .zip(&g.bits()[r + x1..r + x2])
                                .filter(|(&u, &v)| u & v != 0)
                                .count();
                        }
                        inter as f64 / (a.4 + b.4 - inter) as f64
                    }
                    _ => 0.0,
                })
                .collect()
        })
        .collect())
}

/// Prediction visiting order: descending score, ties by index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Greedy matching on a precomputed IoU matrix. Each prediction, in
/// `order`, takes the unmatched gt with the highest IoU (lowest index on
/// ties) provided that IoU is at least `threshold` and positive.
pub fn match_from_ious(ious: &[Vec<f64>], n_gt: usize, order: &[usize], threshold: f64) -> MatchResult {
    let mut taken = vec![false; n_gt];
    let mut pairs = Vec::new();
    let mut unmatched_preds = Vec::new();
    for &p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &iou) in ious[p].iter().enumerate() {
            if taken[g] || iou < threshold || iou <= 0.0 {
                continue;
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) => {
                taken[g] = true;
                pairs.push((p, g, iou));
            }
            None => unmatched_preds.push(p),
        }
    }
    MatchResult {
        threshold,
        pairs,
        unmatched_preds,
        unmatched_gts: (0..n_gt).filter(|&g| !taken[g]).collect(),
    }
}

pub fn match_instances(preds: &[(BinaryMask, f64)], gts: &[BinaryMask], threshold: f64) -> Result<MatchResult> {
    let masks: Vec<BinaryMask> = preds.iter().map(|(m, _)| m.clone()).collect();
    let scores: Vec<f64> = preds.iter().map(|(_, s)| *s).collect();
    let ious = iou_matrix(&masks, gts)?;
    Ok(match_from_ious(&ious, gts.len(), &score_order(&scores), threshold))
}

/// Matching state of one image, reusable across thresholds.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub image_id: String,
    pub n_gt: usize,
    pub scores: Vec<f64>,
    pub ious: Vec<Vec<f64>>,
}

impl ImageEval {
    pub fn new(image_id: &str, preds: &[(BinaryMask, f64)], gts: &[BinaryMask]) -> Result<Self> {
        let masks: Vec<BinaryMask> = preds.iter().map(|(m, _)| m.clone()).collect();
        Ok(ImageEval {
            image_id: image_id.to_string(),
            n_gt: gts.len(),
            scores: preds.iter().map(|(_, s)| *s).collect(),
            ious: iou_matrix(&masks, gts)?,
        })
    }

    pub fn n_pred(&self) -> usize {
        self.scores.len()
    }

    pub fn matches(&self, threshold: f64) -> MatchResult {
        match_from_ious(&self.ious, self.n_gt, &score_order(&self.scores), threshold)
    }
}

/// 101-point interpolated AP of one ranked TP/FP sequence.
fn ap_101(tp: &[bool], n_gt: usize) -> f64 {
    let (mut ctp, mut cfp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(ctp as f64 / n_gt as f64);
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let k = recall.partition_point(|&x| x < r);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// Per-threshold AP with predictions pooled across all images; ties in
/// score are ranked by (image id, prediction index). `None` when there is
/// no ground truth at all.
pub fn average_precision(images: &[ImageEval]) -> Option<[f64; 10]> {
    let n_gt: usize = images.iter().map(|e| e.n_gt).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, &str, usize, usize)> = Vec::new();
    for (i, e) in images.iter().enumerate() {
        for (p, &s) in e.scores.iter().enumerate() {
            ranked.push((s, &e.image_id, p, i));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.cmp(b.1))
            .then(a.2.cmp(&b.2))
    });
    Some(thresholds().map(|t| {
        let matched: Vec<Vec<bool>> = images
            .iter()
            .map(|e| {
                let mut m = vec![false; e.n_pred()];
                for (p, _, _) in e.matches(t).pairs {
                    m[p] = true;
                }
                m
            })
            .collect();
        let tp: Vec<bool> = ranked.iter().map(|&(_, _, p, i)| matched[i][p]).collect();
        ap_101(&tp, n_gt)
    }))
}

/// Mean over gt instances of the IoU of its match at threshold 0 (only
/// positive-IoU pairs match); unmatched gts count as 0.
pub fn mean_mask_iou(images: &[ImageEval]) -> Option<f64> {
    let n_gt: usize = images.iter().map(|e| e.n_gt).sum();
    (n_gt > 0).then(|| {
        let total: f64 = images
            .iter()
            .map(|e| e.matches(0.0).pairs.iter().fold(0.0, |acc, p| acc + p.2))
            .fold(0.0, |a, b| a + b);
        total / n_gt as f64
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageReport {
    pub image_id: String,
    pub n_gt: usize,
    pub n_pred: usize,
    pub ap50: Option<f64>,
    pub ap: Option<f64>,
    pub mean_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_threshold_ap: Option<[f64; 10]>,
    pub ap: Option<f64>,
    pub mean_mask_iou: Option<f64>,
    pub n_gt: usize,
    pub n_pred: usize,
    pub per_image: Vec<ImageReport>,
}

fn mean(v: &[f64; 10]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl EvalReport {
    pub fn from_images(mut images: Vec<ImageEval>) -> Self {
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let per_image = images
            .par_iter()
            .map(|e| {
                let one = std::slice::from_ref(e);
                let pt = average_precision(one);
                ImageReport {
                    image_id: e.image_id.clone(),
                    n_gt: e.n_gt,
                    n_pred: e.n_pred(),
                    ap50: pt.map(|v| v[0]),
                    ap: pt.as_ref().map(mean),
                    mean_iou: mean_mask_iou(one),
                }
            })
            .collect();
        let per_threshold_ap = average_precision(&images);
        EvalReport {
            ap: per_threshold_ap.as_ref().map(mean),
            per_threshold_ap,
            mean_mask_iou: mean_mask_iou(&images),
            n_gt: images.iter().map(|e| e.n_gt).sum(),
            n_pred: images.iter().map(|e| e.n_pred()).sum(),
            per_image,
        }
    }

    pub fn ap50(&self) -> Option<f64> {
        self.per_threshold_ap.map(|v| v[0])
    }

    /// `image_id,n_gt,n_pred,ap50,ap,mean_iou` rows plus a final `ALL` row.
    /// Undefined metrics are written as `NA`.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("image_id,n_gt,n_pred,ap50,ap,mean_iou\n");
        for r in &self.per_image {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.image_id, r.n_gt, r.n_pred, f(r.ap50), f(r.ap), f(r.mean_iou));
        }
        let _ = writeln!(
            s,
            "ALL,{},{},{},{},{}",
            self.n_gt,
            self.n_pred,
            f(self.ap50()),
            f(self.ap),
            f(self.mean_mask_iou)
        );
        s
    }

    pub fn summary(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{:.2}", 100.0 * x));
        format!(
            "images={} gt={} pred={} AP={} AP50={} mean_mask_IoU={}",
            self.per_image.len(),
            self.n_gt,
            self.n_pred,
            pct(self.ap),
            pct(self.ap50()),
            pct(self.mean_mask_iou)
        )
    }
}

pub type ScoredMasks = Vec<(BinaryMask, f64)>;

/// Scores predictions against ground truth. Both lists must cover the same
/// set of image ids.
pub fn evaluate_dataset(preds: &[(String, ScoredMasks)], gts: &[(String, Vec<BinaryMask>)]) -> Result<EvalReport> {
    let mut by_id: HashMap<&str, &ScoredMasks> = HashMap::new();
    for (id, p) in preds {
        if by_id.insert(id, p).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate prediction id {id}")));
        }
    }
    if by_id.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted images vs {} ground-truth images",
            by_id.len(),
            gts.len()
        )));
    }
    let images = gts
        .iter()
        .map(|(id, g)| {
            let p = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("no predictions for image {id}")))?;
            ImageEval::new(id, p, g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_images(images))
}

/// Turns a submission into scored predictions. Submission lines carry no
/// confidence, so every instance scores 1 and ties fall back to file order.
/// Images absent from the file get no predictions.
pub fn predictions_from_submission(sub: &Submission, dims: &[(String, usize, usize)]) -> Result<Vec<(String, ScoredMasks)>> {
    let grouped: HashMap<String, Vec<_>> = sub.by_image().into_iter().collect();
    if let Some(id) = grouped.keys().find(|id| !dims.iter().any(|(d, _, _)| d == *id)) {
        return Err(Error::InvalidArgument(format!("submission mentions unknown image {id}")));
    }
    dims.iter()
        .map(|(id, h, w)| {
            let masks = grouped
                .get(id)
                .map(|lines| {
                    lines
                        .iter()
                        .map(|l| Ok((l.to_mask(*h, *w)?, 1.0)))
                        .collect::<Result<ScoredMasks>>()
                })
                .transpose()?
                .unwrap_or_default();
            Ok((id.clone(), masks))
        })
        .collect()
}
