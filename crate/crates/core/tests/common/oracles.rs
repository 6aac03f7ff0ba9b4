//! Brute-force reference implementations shared by the integration and
//! acceptance suites.

use nucleo::geometry::BoxXYXY;
use nucleo::maskops::BinaryMask;
use rand::Rng;

/// Box IoU from explicit overlap intervals.
pub fn oracle_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let ox = f64::max(0.0, f64::min(a.x2, b.x2) - f64::max(a.x1, b.x1));
    let oy = f64::max(0.0, f64::min(a.y2, b.y2) - f64::max(a.y1, b.y1));
    let i = ox * oy;
    let u = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - i;
    if i <= 0.0 || u <= 0.0 {
        0.0
    } else {
        i / u
    }
}

/// Full pairwise IoU table, then a literal greedy scan: a box survives iff
/// no earlier survivor in (score desc, index asc) order overlaps it above
/// the threshold.
pub fn oracle_nms(boxes: &[BoxXYXY], scores: &[f64], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    let table: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| oracle_iou(&boxes[i], &boxes[j])).collect()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| table[k][i] <= thr) {
            kept.push(i);
        }
    }
    kept
}

pub fn random_box(rng: &mut impl Rng, extent: f64, max_side: f64) -> BoxXYXY {
    let x = rng.random_range(0.0..extent);
    let y = rng.random_range(0.0..extent);
    let w = rng.random_range(0.0..max_side);
    let h = rng.random_range(0.0..max_side);
    BoxXYXY { x1: x, y1: y, x2: x + w, y2: y + h }
}

/// The RPN labelling rule applied literally, pair by pair.
pub fn oracle_rpn_labels(anchors: &[BoxXYXY], gts: &[BoxXYXY], pos: f64, neg: f64) -> Vec<i64> {
    anchors
        .iter()
        .map(|a| {
            let ious: Vec<f64> = gts.iter().map(|g| oracle_iou(a, g)).collect();
            let max = ious.iter().cloned().fold(0.0, f64::max);
            let is_argmax_for_some_gt = gts.iter().enumerate().any(|(gi, g)| {
                let best_for_g = anchors.iter().map(|b| oracle_iou(b, g)).fold(0.0, f64::max);
                best_for_g > 0.0 && ious[gi] == best_for_g
            });
            if gts.is_empty() {
                0
            } else if max >= pos || is_argmax_for_some_gt {
                1
            } else if max < neg {
                0
            } else {
                -1
            }
        })
        .collect()
}

pub fn pixel_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut i = 0usize;
    let mut u = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(y, x), b.get(y, x));
            i += (p && q) as usize;
            u += (p || q) as usize;
        }
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// Enumerates every one-to-one partial assignment with IoU >= t (and > 0)
/// and returns the one whose per-prediction outcome, read in score order,
/// is lexicographically best: higher IoU first, then lower gt index, and
/// any match beats no match.
pub fn oracle_greedy(ious: &[Vec<f64>], order: &[usize], n_gt: usize, t: f64) -> Vec<(usize, usize)> {
    fn rec(
        k: usize,
        order: &[usize],
        ious: &[Vec<f64>],
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        t: f64,
        best: &mut Option<(Vec<(f64, i64)>, Vec<Option<usize>>)>,
    ) {
        if k == order.len() {
            let key: Vec<(f64, i64)> = order
                .iter()
                .zip(cur.iter())
                .map(|(&p, g)| g.map_or((-1.0, 0), |g| (ious[p][g], -(g as i64))))
                .collect();
            let better = match best {
                None => true,
                Some((bk, _)) => key.partial_cmp(bk) == Some(std::cmp::Ordering::Greater),
            };
            if better {
                *best = Some((key, cur.clone()));
            }
            return;
        }
        let p = order[k];
        cur.push(None);
        rec(k + 1, order, ious, used, cur, t, best);
        cur.pop();
        for g in 0..used.len() {
            if !used[g] && ious[p][g] >= t && ious[p][g] > 0.0 {
                used[g] = true;
                cur.push(Some(g));
                rec(k + 1, order, ious, used, cur, t, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let mut best = None;
    rec(0, order, ious, &mut vec![false; n_gt], &mut Vec::new(), t, &mut best);
    let (_, assign) = best.unwrap();
    order.iter().zip(assign).filter_map(|(&p, g)| g.map(|g| (p, g))).collect()
}
