//! Dataset-level metrics against an independent AP implementation.

use nucleo::eval::{average_precision, evaluate_dataset, mean_mask_iou, thresholds, ImageEval, ScoredMasks};
use nucleo::maskops::{mask_iou, BinaryMask};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Gts = Vec<(String, Vec<BinaryMask>)>;
type Preds = Vec<(String, ScoredMasks)>;

fn random_rect(rng: &mut impl Rng, n: usize) -> BinaryMask {
    let x = rng.random_range(0..n - 6);
    let y = rng.random_range(0..n - 6);
    BinaryMask::rect(n, n, x, y, x + rng.random_range(3..7), y + rng.random_range(3..7))
}

/// Jitters a mask by one pixel on random sides.
fn perturb(rng: &mut impl Rng, m: &BinaryMask) -> BinaryMask {
    let b = m.bbox().unwrap();
    let d = |rng: &mut ChaCha8Rng| rng.random_range(-1i64..=1);
    let mut r = ChaCha8Rng::seed_from_u64(rng.random());
    let clamp = |v: i64| v.clamp(0, m.width() as i64) as usize;
    let (x1, y1) = (clamp(b.x1 as i64 + d(&mut r)), clamp(b.y1 as i64 + d(&mut r)));
    let (x2, y2) = (clamp(b.x2 as i64 + d(&mut r)).max(x1 + 1), clamp(b.y2 as i64 + d(&mut r)).max(y1 + 1));
    BinaryMask::rect(m.height(), m.width(), x1, y1, x2, y2)
}

fn random_dataset(seed: u64) -> (Gts, Preds) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 24;
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for i in 0..rng.random_range(1..5) {
        let g: Vec<BinaryMask> = (0..rng.random_range(0..5)).map(|_| random_rect(&mut rng, n)).collect();
        let mut p: ScoredMasks = Vec::new();
        for m in &g {
            if rng.random_bool(0.8) {
                let q = perturb(&mut rng, m);
                p.push((q, rng.random_range(0..5) as f64 / 4.0));
            }
        }
        for _ in 0..rng.random_range(0..3) {
            p.push((random_rect(&mut rng, n), rng.random_range(0..5) as f64 / 4.0));
        }
        p.shuffle(&mut rng);
        gts.push((format!("img{i}"), g));
        preds.push((format!("img{i}"), p));
    }
    (gts, preds)
}

/// COCO-style AP written out from its definition: per-image greedy
/// matching, one global ranking, precision envelope, 101 recall points.
fn oracle_ap(gts: &Gts, preds: &Preds) -> Option<Vec<f64>> {
    let total_gt: usize = gts.iter().map(|g| g.1.len()).sum();
    if total_gt == 0 {
        return None;
    }
    let mut out = Vec::new();
    for t in (0..10).map(|i| 0.5 + 0.05 * i as f64) {
        let mut ranked: Vec<(f64, String, usize, bool)> = Vec::new();
        for ((id, g), (_, p)) in gts.iter().zip(preds) {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].1.partial_cmp(&p[a].1).unwrap().then(a.cmp(&b)));
            let mut taken = vec![false; g.len()];
            for &i in &order {
                let mut best: Option<(usize, f64)> = None;
                for (j, gm) in g.iter().enumerate() {
                    let v = mask_iou(&p[i].0, gm).unwrap();
                    if !taken[j] && v >= t - 1e-12 && v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    taken[j] = true;
                }
                ranked.push((p[i].1, id.clone(), i, best.is_some()));
            }
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let (mut tp, mut fp) = (0.0, 0.0);
        let mut pr: Vec<(f64, f64)> = Vec::new();
        for r in &ranked {
            if r.3 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            pr.push((tp / total_gt as f64, tp / (tp + fp)));
        }
        for k in (0..pr.len().saturating_sub(1)).rev() {
            pr[k].1 = pr[k].1.max(pr[k + 1].1);
        }
        let mut sum = 0.0;
        for r in 0..=100 {
            let target = r as f64 / 100.0;
            sum += pr.iter().find(|(rec, _)| *rec >= target - 1e-12).map_or(0.0, |x| x.1);
        }
        out.push(sum / 101.0);
    }
    Some(out)
}

#[test]
fn thresholds_run_from_half_to_095() {
    let t = thresholds();
    assert_eq!(t[0], 0.5);
    assert!((t[9] - 0.95).abs() < 1e-12);
}

#[test]
fn ap_equals_independent_computation() {
    for seed in 0..150 {
        let (gts, preds) = random_dataset(seed);
        let report = evaluate_dataset(&preds, &gts).unwrap();
        match (report.per_threshold_ap, oracle_ap(&gts, &preds)) {
            (None, None) => assert!(report.ap.is_none() && report.mean_mask_iou.is_none()),
            (Some(got), Some(want)) => {
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12, "seed {seed}: {got:?} vs {want:?}");
                }
                let mean = got.iter().sum::<f64>() / 10.0;
                assert!((report.ap.unwrap() - mean).abs() < 1e-12);
                for w in got.windows(2) {
                    assert!(w[0] >= w[1], "seed {seed}: not monotone {got:?}");
                }
            }
            other => panic!("seed {seed}: definedness differs {other:?}"),
        }
    }
}

#[test]
fn loopback_gives_perfect_scores() {
    let (gts, _) = random_dataset(3);
    let preds: Preds = gts.iter().map(|(id, g)| (id.clone(), g.iter().map(|m| (m.clone(), 1.0)).collect())).collect();
    let r = evaluate_dataset(&preds, &gts).unwrap();
    if r.n_gt > 0 {
        assert_eq!(r.ap, Some(1.0));
        assert_eq!(r.mean_mask_iou, Some(1.0));
    }
}

#[test]
fn imperfect_predictions_are_not_perfect() {
    for seed in 0..50 {
        let (gts, preds) = random_dataset(seed);
        let r = evaluate_dataset(&preds, &gts).unwrap();
        let identical = gts.iter().zip(&preds).all(|((_, g), (_, p))| {
            g.len() == p.len() && g.iter().all(|m| p.iter().any(|(q, _)| q == m))
        });
        if r.n_gt > 0 && !identical {
            assert!(r.ap.unwrap() < 1.0 || r.mean_mask_iou.unwrap() < 1.0, "seed {seed}");
        }
    }
}

#[test]
fn equal_scores_make_the_report_independent_of_image_order() {
    for seed in 0..30 {
        let (gts, mut preds) = random_dataset(seed);
        for p in &mut preds {
            for s in &mut p.1 {
                s.1 = 0.5;
            }
        }
        let base = evaluate_dataset(&preds, &gts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<usize> = (0..preds.len()).collect();
        ids.shuffle(&mut rng);
        let sp: Preds = ids.iter().map(|&i| preds[i].clone()).collect();
        let sg: Gts = ids.iter().map(|&i| gts[i].clone()).collect();
        assert_eq!(evaluate_dataset(&sp, &sg).unwrap(), base, "seed {seed}");
        // predictions and gts listed in different image orders still pair by id
        let rev: Preds = preds.iter().rev().cloned().collect();
        assert_eq!(evaluate_dataset(&rev, &gts).unwrap(), base, "seed {seed}");
    }
}

#[test]
fn lower_scored_duplicate_never_raises_ap() {
    for seed in 0..60 {
        let (gts, preds) = random_dataset(seed);
        let before = evaluate_dataset(&preds, &gts).unwrap();
        let Some(ap0) = before.ap else { continue };
        let mut dup = preds.clone();
        if let Some(p) = dup.iter_mut().find(|p| !p.1.is_empty()) {
            let (m, s) = p.1[0].clone();
            p.1.push((m, s - 1.0));
        }
        let after = evaluate_dataset(&dup, &gts).unwrap();
        assert!(after.ap.unwrap() <= ap0 + 1e-12, "seed {seed}");
    }
}

#[test]
fn empty_predictions_count_every_gt_as_missed() {
    let (gts, _) = random_dataset(8);
    let preds: Preds = gts.iter().map(|(id, _)| (id.clone(), Vec::new())).collect();
    let r = evaluate_dataset(&preds, &gts).unwrap();
    if r.n_gt > 0 {
        assert_eq!((r.ap, r.mean_mask_iou), (Some(0.0), Some(0.0)));
    }
    for (img, (_, g)) in r.per_image.iter().zip(&gts) {
        assert_eq!((img.n_gt, img.n_pred), (g.len(), 0));
    }
    let csv = r.to_csv();
    assert!(csv.starts_with("image_id,n_gt,n_pred,ap50,ap,mean_iou\n"));
    assert!(csv.lines().last().unwrap().starts_with("ALL,"));
    assert_eq!(csv.lines().count(), gts.len() + 2);
}

#[test]
fn image_level_helpers_agree_with_the_report() {
    let (gts, preds) = random_dataset(21);
    let images: Vec<ImageEval> = gts
        .iter()
        .zip(&preds)
        .map(|((id, g), (_, p))| ImageEval::new(id, p, g).unwrap())
        .collect();
    let r = evaluate_dataset(&preds, &gts).unwrap();
    assert_eq!(average_precision(&images), r.per_threshold_ap);
    assert_eq!(mean_mask_iou(&images), r.mean_mask_iou);
}
